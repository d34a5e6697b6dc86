//! Seeded template corpora for smoke runs and tests.

use dialmem::data::{DialogueSession, NliLabel, NliPair, Turn};
use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: [&str; 8] = ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi"];
const COLORS: [&str; 6] = ["red", "blue", "green", "black", "white", "yellow"];
const THINGS: [&str; 5] = ["hat", "bike", "coat", "scarf", "bag"];
const CITIES: [&str; 6] = ["paris", "tokyo", "boston", "rome", "lima", "oslo"];
const JOBS: [&str; 6] = ["teacher", "nurse", "pilot", "chef", "farmer", "lawyer"];
const FOODS: [&str; 6] = ["pizza", "sushi", "pasta", "tacos", "salad", "soup"];
const PETS: [&str; 5] = ["dog", "cat", "parrot", "rabbit", "turtle"];
const SPORTS: [&str; 5] = ["tennis", "soccer", "golf", "hockey", "chess"];

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

/// `size` entailment pairs whose hypotheses drop a detail of the premise.
pub fn nli(size: usize, seed: u64) -> Vec<NliPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|_| {
            let n = pick(&mut rng, &NAMES);
            let (premise, hypothesis) = match rng.random_range(0..5) {
                0 => {
                    let (c, t) = (pick(&mut rng, &COLORS), pick(&mut rng, &THINGS));
                    (format!("{n} has a {c} {t} ."), format!("{n} has a {t} ."))
                }
                1 => {
                    let (city, p) = (pick(&mut rng, &CITIES), pick(&mut rng, &PETS));
                    (format!("{n} lives in {city} with a {p} ."), format!("{n} lives in {city} ."))
                }
                2 => {
                    let (j, city) = (pick(&mut rng, &JOBS), pick(&mut rng, &CITIES));
                    (format!("{n} works as a {j} in {city} ."), format!("{n} works as a {j} ."))
                }
                3 => {
                    let (a, b) = (pick(&mut rng, &FOODS), pick(&mut rng, &FOODS));
                    (format!("{n} eats {a} and {b} every day ."), format!("{n} eats {a} ."))
                }
                _ => {
                    let c = pick(&mut rng, &COLORS);
                    (format!("{n} drives a {c} car to work ."), format!("{n} drives a car ."))
                }
            };
            NliPair {
                premise,
                hypothesis,
                label: NliLabel::Entailment,
            }
        })
        .collect()
}

#[derive(Clone, Copy)]
struct Attribute {
    values: &'static [&'static str],
    persona: fn(&str) -> String,
    query: &'static str,
    response: fn(&str) -> String,
}

const ATTRIBUTES: [Attribute; 6] = [
    Attribute {
        values: &COLORS,
        persona: |v| format!("i drive a {v} car ."),
        query: "what car do you drive ?",
        response: |v| format!("i drive a {v} car ."),
    },
    Attribute {
        values: &CITIES,
        persona: |v| format!("i live in {v} ."),
        query: "where do you live ?",
        response: |v| format!("i live in {v} ."),
    },
    Attribute {
        values: &JOBS,
        persona: |v| format!("i work as a {v} ."),
        query: "what do you do for a living ?",
        response: |v| format!("i am a {v} ."),
    },
    Attribute {
        values: &FOODS,
        persona: |v| format!("my favorite food is {v} ."),
        query: "what do you like to eat ?",
        response: |v| format!("i love {v} ."),
    },
    Attribute {
        values: &PETS,
        persona: |v| format!("i have a pet {v} ."),
        query: "do you have any pets ?",
        response: |v| format!("yes , i have a {v} ."),
    },
    Attribute {
        values: &SPORTS,
        persona: |v| format!("i play {v} on weekends ."),
        query: "what do you do for fun ?",
        response: |v| format!("i like to play {v} ."),
    },
];

/// Every response the dialogue templates can produce.
pub fn response_pool() -> Vec<String> {
    ATTRIBUTES
        .iter()
        .flat_map(|a| a.values.iter().map(move |v| (a.response)(v)))
        .collect()
}

/// `size` sessions with 4 to 6 persona sentences and 2 or 3 turns. Each
/// response is fixed by the persona and the query. With `candidates > 0`
/// every turn lists that many distractors drawn from [`response_pool`].
pub fn dialogue(size: usize, seed: u64, candidates: usize) -> Vec<DialogueSession> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = response_pool();
    (0..size)
        .map(|_| {
            let n_persona = rng.random_range(4..=ATTRIBUTES.len());
            let chosen: Vec<(Attribute, &str)> = index::sample(&mut rng, ATTRIBUTES.len(), n_persona)
                .iter()
                .map(|i| {
                    let a = ATTRIBUTES[i];
                    (a, pick(&mut rng, a.values))
                })
                .collect();
            let persona = chosen.iter().map(|(a, v)| (a.persona)(v)).collect();
            let n_turns = rng.random_range(2..=3);
            let turns = index::sample(&mut rng, chosen.len(), n_turns)
                .iter()
                .map(|i| {
                    let (a, v) = chosen[i];
                    let response = (a.response)(v);
                    let candidates = (candidates > 0).then(|| {
                        let others: Vec<&String> = pool.iter().filter(|r| **r != response).collect();
                        index::sample(&mut rng, others.len(), candidates.min(others.len()))
                            .iter()
                            .map(|j| others[j].clone())
                            .collect()
                    });
                    Turn {
                        query: a.query.to_owned(),
                        response,
                        candidates,
                    }
                })
                .collect();
            DialogueSession { persona, turns }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nli_is_seeded_and_all_entailment() {
        let a = nli(64, 3);
        assert_eq!(a.len(), 64);
        assert_eq!(a, nli(64, 3));
        assert_ne!(a, nli(64, 4));
        assert!(a.iter().all(|p| p.label == NliLabel::Entailment));
    }

    #[test]
    fn hypotheses_are_drawn_from_premise_words() {
        for p in nli(100, 1) {
            let words: Vec<&str> = p.premise.split(' ').collect();
            assert!(p.hypothesis.split(' ').all(|w| words.contains(&w)), "{p:?}");
        }
    }

    #[test]
    fn dialogue_schema() {
        let s = dialogue(16, 0, 4);
        assert_eq!(s.len(), 16);
        for d in &s {
            assert!(d.persona.len() >= 4);
            assert!(d.turns.len() >= 2);
            for t in &d.turns {
                let c = t.candidates.as_ref().unwrap();
                assert_eq!(c.len(), 4);
                assert!(!c.contains(&t.response));
            }
        }
        assert!(dialogue(3, 0, 0).iter().flat_map(|d| &d.turns).all(|t| t.candidates.is_none()));
    }

    #[test]
    fn responses_follow_from_the_persona() {
        for d in dialogue(30, 9, 0) {
            for t in &d.turns {
                let a = ATTRIBUTES.iter().find(|a| a.query == t.query).unwrap();
                let v = a.values.iter().find(|v| (a.response)(v) == t.response).unwrap();
                assert!(d.persona.contains(&(a.persona)(v)));
            }
        }
    }
}
