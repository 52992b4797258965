//! Deterministic synthetic yes/no inference task.
//!
//! A seed fixes a small world: every entity belongs to one class and every
//! class carries one property (classes and properties are in bijection).
//! Both depths ask `Is Bo red?`.
//!
//! * Chain 1 passages state entity properties directly (`Bo is red.`), so
//!   one fact answers the question.
//! * Chain 2 passages hold only membership facts (`Bo is a fox.`) and
//!   rules (`Every fox is red.`), so the answer needs the entity's fact and
//!   its class rule. Negatives name a property whose rule is also present
//!   but attached to a different class, so the chain provably fails.
//!
//! Passages are shuffled and always include distractors.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::BoolExample;

const ENTITY_NAMES: [&str; 16] = [
    "Al", "Bo", "Cy", "Di", "Ed", "Fay", "Gus", "Hal", "Ivy", "Jo", "Kit", "Lu", "Max", "Ned",
    "Oz", "Pam",
];
const CLASS_NAMES: [&str; 12] = [
    "cat", "dog", "fox", "owl", "elk", "ant", "bee", "yak", "emu", "ram", "cod", "eel",
];
const PROPERTY_NAMES: [&str; 12] = [
    "red", "big", "shy", "wet", "old", "fast", "calm", "loud", "soft", "cold", "tall", "wild",
];

fn pool_name(pool: &[&str], i: usize) -> String {
    let base = pool[i % pool.len()];
    match i / pool.len() {
        0 => base.to_string(),
        k => format!("{base}{k}"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Chain {
    One,
    Two,
}

impl From<Chain> for u8 {
    fn from(c: Chain) -> u8 {
        match c {
            Chain::One => 1,
            Chain::Two => 2,
        }
    }
}

impl TryFrom<u8> for Chain {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Chain::One),
            2 => Ok(Chain::Two),
            other => Err(format!("chain must be 1 or 2, got {other}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n: usize,
    pub n_entities: usize,
    pub n_properties: usize,
    pub chain: Chain,
}

impl SynthSpec {
    pub fn generate(&self) -> Result<Vec<BoolExample>> {
        synth_generate(
            self.seed,
            self.n,
            self.n_entities,
            self.n_properties,
            self.chain,
        )
    }
}

/// The fixed world behind one seed.
#[derive(Clone, Debug)]
pub struct World {
    pub entities: Vec<String>,
    pub classes: Vec<String>,
    pub properties: Vec<String>,
    /// Class index of each entity.
    pub class_of: Vec<usize>,
    /// Property index of each class.
    pub property_of: Vec<usize>,
}

impl World {
    fn sample(rng: &mut ChaCha8Rng, n_entities: usize, n_properties: usize) -> Self {
        let class_of = (0..n_entities)
            .map(|_| rng.gen_range(0..n_properties))
            .collect();
        let mut property_of: Vec<usize> = (0..n_properties).collect();
        property_of.shuffle(rng);
        Self {
            entities: (0..n_entities)
                .map(|i| pool_name(&ENTITY_NAMES, i))
                .collect(),
            classes: (0..n_properties)
                .map(|i| pool_name(&CLASS_NAMES, i))
                .collect(),
            properties: (0..n_properties)
                .map(|i| pool_name(&PROPERTY_NAMES, i))
                .collect(),
            class_of,
            property_of,
        }
    }

    fn fact(&self, e: usize) -> String {
        format!(
            "{} is a {}.",
            self.entities[e], self.classes[self.class_of[e]]
        )
    }

    fn property_of_entity(&self, e: usize) -> usize {
        self.property_of[self.class_of[e]]
    }

    fn trait_fact(&self, e: usize) -> String {
        format!(
            "{} is {}.",
            self.entities[e],
            self.properties[self.property_of_entity(e)]
        )
    }

    fn rule(&self, c: usize) -> String {
        format!(
            "Every {} is {}.",
            self.classes[c], self.properties[self.property_of[c]]
        )
    }
}

pub fn world_for_seed(seed: u64, n_entities: usize, n_properties: usize) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    World::sample(&mut rng, n_entities, n_properties)
}

const DISTRACTOR_FACTS: usize = 2;

fn pick_other(rng: &mut ChaCha8Rng, n: usize, exclude: &[usize]) -> usize {
    loop {
        let i = rng.gen_range(0..n);
        if !exclude.contains(&i) {
            return i;
        }
    }
}

/// Generates `n` examples, exactly half of them true, as a pure function
/// of the arguments.
pub fn synth_generate(
    seed: u64,
    n: usize,
    n_entities: usize,
    n_properties: usize,
    chain: Chain,
) -> Result<Vec<BoolExample>> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::Generation(format!(
            "n must be even and >= 2, got {n}"
        )));
    }
    if n_properties < 2 {
        return Err(Error::Generation("need at least 2 properties".into()));
    }
    if n_entities < DISTRACTOR_FACTS + 1 {
        return Err(Error::Generation(format!(
            "need at least {} entities for {DISTRACTOR_FACTS} distractor facts, got {n_entities}",
            DISTRACTOR_FACTS + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = World::sample(&mut rng, n_entities, n_properties);
    if chain == Chain::One && world.class_of.iter().all(|&c| c == world.class_of[0]) {
        return Err(Error::Generation(
            "every entity shares one class; chain-1 negatives cannot be balanced".into(),
        ));
    }

    let mut labels: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .map(|answer| match chain {
            Chain::One => chain_one(&world, &mut rng, answer),
            Chain::Two => chain_two(&world, &mut rng, answer),
        })
        .collect()
}

fn chain_one(world: &World, rng: &mut ChaCha8Rng, answer: bool) -> Result<BoolExample> {
    let ne = world.entities.len();
    let nc = world.classes.len();
    let (e, d1) = loop {
        let e = rng.gen_range(0..ne);
        if answer {
            break (e, pick_other(rng, ne, &[e]));
        }
        // The asked property is carried by a distractor entity so it still
        // appears in the passage.
        let candidates: Vec<usize> = (0..ne)
            .filter(|&d| world.class_of[d] != world.class_of[e])
            .collect();
        if let Some(&d1) = candidates.choose(rng) {
            break (e, d1);
        }
    };
    let asked = world.property_of_entity(if answer { e } else { d1 });
    let d2 = pick_other(rng, ne, &[e, d1]);
    let mut sentences = vec![
        world.trait_fact(e),
        world.trait_fact(d1),
        world.trait_fact(d2),
        world.fact(rng.gen_range(0..ne)),
        world.rule(rng.gen_range(0..nc)),
    ];
    sentences.shuffle(rng);
    BoolExample::new(
        sentences.join(" "),
        format!("Is {} {}?", world.entities[e], world.properties[asked]),
        answer,
    )
}

fn chain_two(world: &World, rng: &mut ChaCha8Rng, answer: bool) -> Result<BoolExample> {
    let ne = world.entities.len();
    let nc = world.classes.len();
    let e = rng.gen_range(0..ne);
    let own = world.class_of[e];
    let other = pick_other(rng, nc, &[own]);
    let asked = if answer {
        world.property_of[own]
    } else {
        world.property_of[other]
    };
    let d1 = pick_other(rng, ne, &[e]);
    let d2 = pick_other(rng, ne, &[e, d1]);
    let mut sentences = vec![
        world.fact(e),
        world.fact(d1),
        world.fact(d2),
        world.rule(own),
        world.rule(other),
    ];
    sentences.shuffle(rng);
    BoolExample::new(
        sentences.join(" "),
        format!("Is {} {}?", world.entities[e], world.properties[asked]),
        answer,
    )
}
