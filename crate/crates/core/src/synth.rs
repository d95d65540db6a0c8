//! Small synthetic premise/hypothesis corpus in the three-class SNLI scheme.
//!
//! Premises describe an agent doing an action somewhere. Entailed hypotheses
//! restate part of the premise, contradictions swap the action or negate the
//! agent, and neutral hypotheses add an unsupported detail.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{tokenize, Example, LabelScheme};
use crate::error::{Error, Result};

const AGENTS: &[&str] = &[
    "a man",
    "a woman",
    "a boy",
    "a girl",
    "the dog",
    "two kids",
    "an old man",
    "the chef",
    "a teenager",
    "the musician",
    "a nurse",
    "the farmer",
];
const ACTIONS: &[&str] = &[
    "is running",
    "is eating lunch",
    "is sleeping",
    "is playing guitar",
    "is reading a book",
    "is swimming",
    "is riding a bike",
    "is painting a wall",
    "is cooking dinner",
    "is climbing a rock",
    "is dancing",
    "is singing",
];
const PLACES: &[&str] = &[
    "in the park",
    "on the beach",
    "at home",
    "in a kitchen",
    "on a street",
    "near a lake",
    "in the snow",
    "at a market",
];
const DETAILS: &[&str] = &[
    "because it is sunny",
    "for a contest",
    "with a best friend",
    "before work",
    "to win a prize",
    "after a long day",
    "for the first time",
];
const NEGATED_AGENTS: &[&str] = &["nobody", "no one"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub examples: usize,
    pub seed: u64,
    /// Fraction of examples whose label is replaced by a uniformly drawn one.
    pub label_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            examples: 1000,
            seed: 1,
            label_noise: 0.0,
        }
    }
}

fn pick<'a>(rng: &mut impl Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

fn other<'a>(rng: &mut impl Rng, xs: &[&'a str], not: &str) -> &'a str {
    loop {
        let x = pick(rng, xs);
        if x != not {
            return x;
        }
    }
}

/// One sentence pair per example, labels balanced in expectation.
pub fn generate(config: &SynthConfig) -> Result<Vec<Example>> {
    if !(0.0..=1.0).contains(&config.label_noise) {
        return Err(Error::Config(format!(
            "label_noise must lie in [0, 1], got {}",
            config.label_noise
        )));
    }
    let scheme = LabelScheme::Snli;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.examples);
    for _ in 0..config.examples {
        let agent = pick(&mut rng, AGENTS);
        let action = pick(&mut rng, ACTIONS);
        let place = pick(&mut rng, PLACES);
        let premise = format!("{agent} {action} {place} .");
        let label = rng.gen_range(0..3);
        let hypothesis = match scheme.labels()[label] {
            "entailment" => match rng.gen_range(0..3) {
                0 => format!("{agent} {action} ."),
                1 => format!("someone {action} {place} ."),
                _ => format!("{agent} {action} {place} ."),
            },
            "contradiction" => match rng.gen_range(0..2) {
                0 => format!("{agent} {} {place} .", other(&mut rng, ACTIONS, action)),
                _ => format!("{} {action} .", pick(&mut rng, NEGATED_AGENTS)),
            },
            _ => format!("{agent} {action} {} .", pick(&mut rng, DETAILS)),
        };
        let label = if rng.gen::<f64>() < config.label_noise {
            rng.gen_range(0..3)
        } else {
            label
        };
        out.push(Example {
            premise: tokenize(&premise),
            hypothesis: tokenize(&hypothesis),
            label,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct Record<'a> {
    sentence1: String,
    sentence2: String,
    gold_label: &'a str,
}

/// Writes examples as JSONL records with `sentence1`, `sentence2`, `gold_label`.
pub fn write_jsonl(path: &Path, examples: &[Example], scheme: LabelScheme) -> Result<()> {
    let mut buf = Vec::new();
    for e in examples {
        let rec = Record {
            sentence1: e.premise.join(" "),
            sentence2: e.hypothesis.join(" "),
            gold_label: scheme.labels()[e.label],
        };
        serde_json::to_writer(&mut buf, &rec).map_err(|e| Error::Input(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_examples, CorpusFormat};

    #[test]
    fn deterministic_and_balanced() {
        let cfg = SynthConfig {
            examples: 3000,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        for c in 0..3 {
            let n = a.iter().filter(|e| e.label == c).count();
            assert!((900..1100).contains(&n), "class {c}: {n}");
        }
        assert!(a
            .iter()
            .all(|e| !e.premise.is_empty() && !e.hypothesis.is_empty()));
    }

    #[test]
    fn noise_changes_some_labels() {
        let clean = generate(&SynthConfig::default()).unwrap();
        let noisy = generate(&SynthConfig {
            label_noise: 0.3,
            ..SynthConfig::default()
        })
        .unwrap();
        let changed = clean
            .iter()
            .zip(&noisy)
            .filter(|(a, b)| a.label != b.label)
            .count();
        // Noise consumes extra draws, so sentences diverge too; just check
        // that the noisy labels are not all the clean ones.
        assert!(changed > 0);
        assert!(generate(&SynthConfig {
            label_noise: 1.5,
            ..SynthConfig::default()
        })
        .is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.jsonl");
        let ex = generate(&SynthConfig {
            examples: 20,
            ..SynthConfig::default()
        })
        .unwrap();
        write_jsonl(&path, &ex, LabelScheme::Snli).unwrap();
        let back = load_examples(&path, CorpusFormat::Jsonl, LabelScheme::Snli).unwrap();
        assert_eq!(back.examples, ex);
        assert_eq!(back.skipped, 0);
    }
}
