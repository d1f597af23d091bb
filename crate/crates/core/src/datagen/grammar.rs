//! "A person wearing … is … at …" description grammar.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlvmError, Result};

pub const CLOTHING_SLOT: &str = "{clothing}";
pub const ACTIVITY_SLOT: &str = "{activity}";
pub const PLACE_SLOT: &str = "{place}";

/// A phrase with the dominant color it implies in a picture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorTerm {
    pub text: String,
    pub rgb: [u8; 3],
}

impl ColorTerm {
    fn new(text: &str, rgb: [u8; 3]) -> Self {
        Self {
            text: text.to_string(),
            rgb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptGrammar {
    pub skeleton: String,
    pub clothing: Vec<ColorTerm>,
    pub activities: Vec<String>,
    pub places: Vec<ColorTerm>,
}

/// Indices of the terms a prompt was filled with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptParts {
    pub clothing: usize,
    pub activity: usize,
    pub place: usize,
}

impl Default for PromptGrammar {
    fn default() -> Self {
        let clothing = [
            ("a red jacket", [200, 30, 40]),
            ("a blue shirt", [40, 70, 200]),
            ("a green sweater", [40, 160, 60]),
            ("a yellow raincoat", [235, 210, 40]),
            ("a black suit", [20, 20, 25]),
            ("a white t-shirt", [240, 240, 240]),
            ("an orange hoodie", [240, 130, 30]),
            ("a purple dress", [130, 50, 160]),
            ("a pink blouse", [240, 140, 180]),
            ("a brown coat", [120, 75, 40]),
        ];
        let places = [
            ("the beach", [230, 210, 160]),
            ("a park", [90, 170, 80]),
            ("the office", [180, 180, 190]),
            ("a snowy mountain", [245, 250, 255]),
            ("a night market", [30, 25, 60]),
            ("the library", [150, 100, 60]),
            ("a swimming pool", [60, 180, 220]),
            ("a desert", [220, 170, 100]),
        ];
        let activities = ["standing", "walking", "sitting", "reading a book", "smiling", "waving"];
        Self {
            skeleton: format!("A person wearing {CLOTHING_SLOT} is {ACTIVITY_SLOT} at {PLACE_SLOT}."),
            clothing: clothing.iter().map(|(t, c)| ColorTerm::new(t, *c)).collect(),
            activities: activities.iter().map(|s| s.to_string()).collect(),
            places: places.iter().map(|(t, c)| ColorTerm::new(t, *c)).collect(),
        }
    }
}

impl PromptGrammar {
    pub fn validate(&self) -> Result<()> {
        for slot in [CLOTHING_SLOT, ACTIVITY_SLOT, PLACE_SLOT] {
            let n = self.skeleton.matches(slot).count();
            if n != 1 {
                return Err(PlvmError::InvalidConfig(format!("skeleton must contain {slot} exactly once, found {n}")));
            }
        }
        if self.clothing.is_empty() || self.activities.is_empty() || self.places.is_empty() {
            return Err(PlvmError::InvalidConfig("grammar term lists must be non-empty".into()));
        }
        Ok(())
    }

    pub fn combinations(&self) -> usize {
        self.clothing.len() * self.activities.len() * self.places.len()
    }

    pub fn fill(&self, parts: PromptParts) -> String {
        self.skeleton
            .replace(CLOTHING_SLOT, &self.clothing[parts.clothing].text)
            .replace(ACTIVITY_SLOT, &self.activities[parts.activity])
            .replace(PLACE_SLOT, &self.places[parts.place].text)
    }

    /// Inverse of [`fill`](Self::fill) by exhaustive match.
    pub fn parse(&self, prompt: &str) -> Option<PromptParts> {
        self.all_parts().find(|&p| self.fill(p) == prompt)
    }

    fn all_parts(&self) -> impl Iterator<Item = PromptParts> + '_ {
        (0..self.clothing.len()).flat_map(move |c| {
            (0..self.activities.len())
                .flat_map(move |a| (0..self.places.len()).map(move |p| PromptParts { clothing: c, activity: a, place: p }))
        })
    }

    /// `n` distinct filled skeletons in a seeded order.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<String>> {
        self.validate()?;
        if n == 0 || n > self.combinations() {
            return Err(PlvmError::InvalidConfig(format!(
                "cannot draw {n} distinct prompts from {} combinations",
                self.combinations()
            )));
        }
        let mut all: Vec<PromptParts> = self.all_parts().collect();
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(all[..n].iter().map(|&p| self.fill(p)).collect())
    }
}
