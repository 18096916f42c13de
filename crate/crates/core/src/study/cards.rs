//! Prompt cards: a feeling, three keywords and an image.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StudyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feeling {
    Happy,
    Sad,
    Conflict,
    Curious,
    Fear,
}

impl Feeling {
    pub const ALL: [Feeling; 5] = [
        Feeling::Happy,
        Feeling::Sad,
        Feeling::Conflict,
        Feeling::Curious,
        Feeling::Fear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feeling::Happy => "happy",
            Feeling::Sad => "sad",
            Feeling::Conflict => "conflict",
            Feeling::Curious => "curious",
            Feeling::Fear => "fear",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Card {
    pub id: String,
    pub feeling: Feeling,
    pub keywords: Vec<String>,
    pub image_uri: String,
}

impl Card {
    pub fn validate(&self) -> Result<(), StudyError> {
        if self.keywords.len() != 3 {
            return Err(StudyError::KeywordCount {
                card: self.id.clone(),
                found: self.keywords.len(),
            });
        }
        Ok(())
    }
}

/// A non-empty set of cards with unique ids, in file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Deck {
    cards: Vec<Card>,
}

impl Deck {
    pub fn new(cards: Vec<Card>) -> Result<Self, StudyError> {
        if cards.is_empty() {
            return Err(StudyError::EmptyDeck);
        }
        let mut seen = BTreeSet::new();
        for c in &cards {
            c.validate()?;
            if !seen.insert(c.id.as_str()) {
                return Err(StudyError::DuplicateCard(c.id.clone()));
            }
        }
        Ok(Deck { cards })
    }

    pub fn from_json(text: &str) -> Result<Self, StudyError> {
        let cards: Vec<Card> = serde_json::from_str(text).map_err(|e| StudyError::Parse(e.to_string()))?;
        Self::new(cards)
    }

    pub fn load(path: &Path) -> Result<Self, StudyError> {
        let text = std::fs::read_to_string(path).map_err(|e| StudyError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn cards(&self) -> &[Card] {
        &self.cards
    }

    pub fn get(&self, id: &str) -> Option<&Card> {
        self.cards.iter().find(|c| c.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.cards.iter().map(|c| c.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.cards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cards.is_empty()
    }
}

impl Default for Deck {
    /// One card per feeling, id = feeling name. Keywords are placeholders to
    /// be replaced through a cards file.
    fn default() -> Self {
        let keywords: [[&str; 3]; 5] = [
            ["sunny", "playful", "easy going"],
            ["melancholy", "lonely", "reflective"],
            ["tension", "struggle", "climax"],
            ["dreamy", "wondering", "curiosity"],
            ["creeping", "uneasy", "stuck"],
        ];
        let cards = Feeling::ALL
            .iter()
            .zip(keywords)
            .map(|(f, kw)| Card {
                id: f.name().to_string(),
                feeling: *f,
                keywords: kw.iter().map(|s| s.to_string()).collect(),
                image_uri: format!("cards/{}.png", f.name()),
            })
            .collect();
        Deck { cards }
    }
}
