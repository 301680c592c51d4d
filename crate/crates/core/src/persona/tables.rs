//! Canonical archetype and occupation tables.
//!
//! The first 15 archetypes and 20 occupations form the base 300-persona
//! corpus; the tails extend it to the 20 x 25 = 500-persona scale. Archetypes
//! 0..10 sit on the high/low pole of one trait each, 10..15 are mixed
//! profiles. Trait order is (O, C, E, A, N).

pub struct Archetype {
    pub name: &'static str,
    pub adjectives: [&'static str; 2],
    pub big_five: [f64; 5],
}

pub const ARCHETYPES: [Archetype; 20] = [
    Archetype { name: "visionary", adjectives: ["curious", "imaginative"], big_five: [0.92, 0.45, 0.50, 0.50, 0.40] },
    Archetype { name: "traditionalist", adjectives: ["conventional", "practical"], big_five: [0.10, 0.60, 0.45, 0.55, 0.45] },
    Archetype { name: "organizer", adjectives: ["disciplined", "meticulous"], big_five: [0.45, 0.93, 0.40, 0.50, 0.35] },
    Archetype { name: "free_spirit", adjectives: ["spontaneous", "careless"], big_five: [0.60, 0.08, 0.55, 0.50, 0.50] },
    Archetype { name: "socialite", adjectives: ["outgoing", "talkative"], big_five: [0.55, 0.45, 0.95, 0.60, 0.35] },
    Archetype { name: "loner", adjectives: ["reserved", "quiet"], big_five: [0.50, 0.55, 0.07, 0.45, 0.50] },
    Archetype { name: "caregiver", adjectives: ["warm", "generous"], big_five: [0.50, 0.55, 0.55, 0.94, 0.40] },
    Archetype { name: "challenger", adjectives: ["blunt", "competitive"], big_five: [0.50, 0.50, 0.60, 0.08, 0.45] },
    Archetype { name: "worrier", adjectives: ["anxious", "sensitive"], big_five: [0.45, 0.45, 0.35, 0.50, 0.93] },
    Archetype { name: "stoic", adjectives: ["calm", "unflappable"], big_five: [0.45, 0.60, 0.45, 0.50, 0.05] },
    Archetype { name: "mentor", adjectives: ["wise", "patient"], big_five: [0.85, 0.80, 0.55, 0.85, 0.20] },
    Archetype { name: "performer", adjectives: ["flamboyant", "restless"], big_five: [0.85, 0.25, 0.90, 0.55, 0.45] },
    Archetype { name: "achiever", adjectives: ["driven", "ambitious"], big_five: [0.40, 0.90, 0.80, 0.25, 0.30] },
    Archetype { name: "recluse", adjectives: ["withdrawn", "brooding"], big_five: [0.70, 0.35, 0.10, 0.40, 0.85] },
    Archetype { name: "steady_hand", adjectives: ["dependable", "modest"], big_five: [0.20, 0.85, 0.35, 0.80, 0.10] },
    Archetype { name: "adventurer", adjectives: ["daring", "energetic"], big_five: [0.90, 0.20, 0.75, 0.45, 0.15] },
    Archetype { name: "perfectionist", adjectives: ["exacting", "tense"], big_five: [0.35, 0.95, 0.25, 0.40, 0.75] },
    Archetype { name: "diplomat", adjectives: ["tactful", "sociable"], big_five: [0.60, 0.60, 0.70, 0.90, 0.30] },
    Archetype { name: "skeptic", adjectives: ["guarded", "critical"], big_five: [0.30, 0.55, 0.40, 0.15, 0.60] },
    Archetype { name: "dreamer", adjectives: ["wistful", "gentle"], big_five: [0.95, 0.30, 0.30, 0.70, 0.70] },
];

pub const OCCUPATIONS: [&str; 25] = [
    "salesperson",
    "executive",
    "fitness trainer",
    "blogger",
    "nurse",
    "software engineer",
    "teacher",
    "carpenter",
    "musician",
    "accountant",
    "farmer",
    "journalist",
    "police officer",
    "barista",
    "architect",
    "librarian",
    "hr manager",
    "professor",
    "data scientist",
    "chef",
    "pilot",
    "gardener",
    "lawyer",
    "photographer",
    "mechanic",
];

/// Held-out occupations of the 300-persona split: HR manager, professor,
/// data scientist, chef.
pub const BASE_HELDOUT_OCCUPATIONS: [usize; 4] = [16, 17, 18, 19];

/// Held-out occupations of the 500-persona split (5 x 20 = 100 personas).
pub const LARGE_HELDOUT_OCCUPATIONS: [usize; 5] = [16, 17, 18, 19, 24];
