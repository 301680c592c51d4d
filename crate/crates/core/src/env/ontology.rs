//! Action ontologies. `V1` is the 12-action base set (one activity per need
//! plus four moves); `V3` splits every need into two activity variants.
//!
//! Style profiles are Big-Five directions in (O, C, E, A, N) order. They are
//! stored raw and normalized on construction.

use serde::{Deserialize, Serialize};

use crate::linalg::norm;

pub const N_NEEDS: usize = 8;
pub const NEED_NAMES: [&str; N_NEEDS] = [
    "hunger", "sleep", "social", "leisure", "hygiene", "fitness", "work", "learning",
];
pub const SOCIAL_NEED: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OntologyVersion {
    V1,
    V3,
}

impl OntologyVersion {
    pub fn as_u8(self) -> u8 {
        match self {
            OntologyVersion::V1 => 1,
            OntologyVersion::V3 => 3,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(OntologyVersion::V1),
            3 => Some(OntologyVersion::V3),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Activity,
    Movement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    North,
    South,
    East,
    West,
}

impl Direction {
    pub fn delta(self) -> (i32, i32) {
        match self {
            Direction::North => (0, -1),
            Direction::South => (0, 1),
            Direction::East => (1, 0),
            Direction::West => (-1, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDescriptor {
    pub id: usize,
    pub name: String,
    pub kind: ActionKind,
    pub target_need: Option<usize>,
    pub direction: Option<Direction>,
    /// Need gain applied by activity actions; zero for moves.
    pub gain: f64,
    pub style_profile: [f64; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionOntology {
    pub version: OntologyVersion,
    pub actions: Vec<ActionDescriptor>,
}

/// Base need gain for v1 activities and the two v3 variants.
pub const GAIN_BASE: f64 = 0.15;
pub const GAIN_VARIANT_A: f64 = 0.18;
pub const GAIN_VARIANT_B: f64 = 0.12;

type Row = (&'static str, Option<usize>, f64, [f64; 5]);

const V1_ACTIVITIES: [Row; 8] = [
    ("eat", Some(0), GAIN_BASE, [0.1, 0.2, 0.1, 0.3, 0.6]),
    ("sleep", Some(1), GAIN_BASE, [-0.2, 0.3, -0.5, 0.1, 0.5]),
    ("socialize", Some(2), GAIN_BASE, [0.2, -0.1, 0.9, 0.5, -0.2]),
    ("play", Some(3), GAIN_BASE, [0.6, -0.6, 0.3, 0.1, 0.1]),
    ("wash", Some(4), GAIN_BASE, [-0.1, 0.8, 0.0, 0.3, 0.3]),
    ("exercise", Some(5), GAIN_BASE, [0.1, 0.6, 0.4, -0.2, -0.5]),
    ("work", Some(6), GAIN_BASE, [-0.2, 0.9, 0.1, -0.1, 0.0]),
    ("study", Some(7), GAIN_BASE, [0.9, 0.4, -0.3, 0.0, 0.0]),
];

// Variant A of each need: larger gain, milder profile. Variant B: smaller
// gain, sharper profile.
const V3_ACTIVITIES: [Row; 16] = [
    ("eat_quick", Some(0), GAIN_VARIANT_A, [-0.1, 0.5, 0.0, -0.2, 0.5]),
    ("eat_slow", Some(0), GAIN_VARIANT_B, [0.4, -0.3, 0.3, 0.6, -0.4]),
    ("nap", Some(1), GAIN_VARIANT_A, [0.2, -0.5, 0.0, 0.1, 0.5]),
    ("sleep_full", Some(1), GAIN_VARIANT_B, [-0.4, 0.7, -0.3, 0.2, 0.2]),
    ("chat", Some(2), GAIN_VARIANT_A, [0.2, 0.0, 0.8, 0.5, -0.1]),
    ("rest_with_others", Some(2), GAIN_VARIANT_B, [-0.1, -0.3, 0.6, 0.9, -0.2]),
    ("rest_alone", Some(3), GAIN_VARIANT_A, [0.3, 0.0, -0.8, 0.1, 0.4]),
    ("play_games", Some(3), GAIN_VARIANT_B, [0.7, -0.7, 0.4, -0.2, 0.0]),
    ("quick_shower", Some(4), GAIN_VARIANT_A, [-0.2, 0.6, 0.2, 0.0, 0.2]),
    ("long_bath", Some(4), GAIN_VARIANT_B, [0.5, -0.2, -0.6, 0.2, 0.6]),
    ("jog", Some(5), GAIN_VARIANT_A, [0.1, 0.5, -0.2, 0.0, -0.5]),
    ("team_sport", Some(5), GAIN_VARIANT_B, [0.1, 0.1, 0.9, -0.3, -0.5]),
    ("focused_work", Some(6), GAIN_VARIANT_A, [-0.3, 0.9, -0.3, -0.1, 0.1]),
    ("planning_work", Some(6), GAIN_VARIANT_B, [0.5, 0.7, 0.4, 0.2, -0.4]),
    ("read_book", Some(7), GAIN_VARIANT_A, [0.7, 0.3, -0.6, 0.1, 0.2]),
    ("attend_class", Some(7), GAIN_VARIANT_B, [0.8, 0.4, 0.5, 0.3, -0.2]),
];

const MOVES: [(&str, Direction, [f64; 5]); 4] = [
    ("move_north", Direction::North, [0.5, -0.3, 0.4, 0.0, -0.3]),
    ("move_south", Direction::South, [0.4, -0.3, 0.5, 0.1, -0.3]),
    ("move_east", Direction::East, [0.5, -0.4, 0.3, 0.0, -0.2]),
    ("move_west", Direction::West, [0.4, -0.2, 0.4, -0.1, -0.4]),
];

/// Removes the trait-mean component and normalizes, so a persona's ranking
/// of actions depends on how its traits deviate from one another.
fn centered_unit(v: [f64; 5]) -> [f64; 5] {
    let mean = v.iter().sum::<f64>() / 5.0;
    let mut out = v;
    out.iter_mut().for_each(|x| *x -= mean);
    let n = norm(&out);
    out.iter_mut().for_each(|x| *x /= n);
    out
}

impl ActionOntology {
    pub fn new(version: OntologyVersion) -> Self {
        let activities: &[Row] = match version {
            OntologyVersion::V1 => &V1_ACTIVITIES,
            OntologyVersion::V3 => &V3_ACTIVITIES,
        };
        let mut actions = Vec::with_capacity(activities.len() + MOVES.len());
        for &(name, need, gain, style) in activities {
            actions.push(ActionDescriptor {
                id: actions.len(),
                name: name.to_string(),
                kind: ActionKind::Activity,
                target_need: need,
                direction: None,
                gain,
                style_profile: centered_unit(style),
            });
        }
        for &(name, dir, style) in &MOVES {
            actions.push(ActionDescriptor {
                id: actions.len(),
                name: name.to_string(),
                kind: ActionKind::Movement,
                target_need: None,
                direction: Some(dir),
                gain: 0.0,
                style_profile: centered_unit(style),
            });
        }
        Self { version, actions }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn n_activities(&self) -> usize {
        self.actions
            .iter()
            .filter(|a| a.kind == ActionKind::Activity)
            .count()
    }

    pub fn is_social(&self, action: usize) -> bool {
        self.actions[action].target_need == Some(SOCIAL_NEED)
    }
}
