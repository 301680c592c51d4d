//! Synthetic persona corpus: archetype x occupation records, their
//! behavioral ground truth, and held-out splits.

mod tables;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::ontology::ActionOntology;
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::seeding::{rng_for, tag};

pub use tables::{
    Archetype, ARCHETYPES, BASE_HELDOUT_OCCUPATIONS, LARGE_HELDOUT_OCCUPATIONS, OCCUPATIONS,
};

/// Number of preferred actions per persona.
pub const PREFERRED_ACTIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BigFiveVector {
    pub openness: f64,
    pub conscientiousness: f64,
    pub extraversion: f64,
    pub agreeableness: f64,
    pub neuroticism: f64,
}

impl BigFiveVector {
    pub fn new(v: [f64; 5]) -> Result<Self> {
        if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Parameter(format!(
                "big-five components must lie in [0,1]: {v:?}"
            )));
        }
        if v.iter().all(|&x| x == 0.0) {
            return Err(Error::Parameter("big-five vector is zero".into()));
        }
        Ok(Self {
            openness: v[0],
            conscientiousness: v[1],
            extraversion: v[2],
            agreeableness: v[3],
            neuroticism: v[4],
        })
    }

    pub fn to_array(&self) -> [f64; 5] {
        [
            self.openness,
            self.conscientiousness,
            self.extraversion,
            self.agreeableness,
            self.neuroticism,
        ]
    }

    pub fn cosine(&self, other: &BigFiveVector) -> f64 {
        cosine(&self.to_array(), &other.to_array()).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaRecord {
    pub persona_id: u32,
    pub archetype_id: u32,
    pub occupation_id: u32,
    pub big_five: BigFiveVector,
    pub preferred_actions: Vec<usize>,
    pub text_surrogate: String,
}

impl PersonaRecord {
    pub fn prefers(&self, action: usize) -> bool {
        self.preferred_actions.contains(&action)
    }
}

/// Top-`PREFERRED_ACTIONS` actions by cosine between the persona's Big-Five
/// vector and each action's style profile. Ties go to the lower action id.
pub fn preferred_actions(big_five: &BigFiveVector, ontology: &ActionOntology) -> Vec<usize> {
    let bf = big_five.to_array();
    let mut scored: Vec<(usize, f64)> = ontology
        .actions
        .iter()
        .map(|a| (a.id, cosine(&bf, &a.style_profile)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut top: Vec<usize> = scored
        .into_iter()
        .take(PREFERRED_ACTIONS)
        .map(|(id, _)| id)
        .collect();
    top.sort_unstable();
    top
}

const OPENERS: [&str; 3] = [
    "A {a0}, {a1} {occ}",
    "This {occ} is {a0} and {a1}",
    "Known around town as a {a0} {occ}, they are also {a1}",
];

fn render_text(archetype: &Archetype, occupation: &str, variant: usize) -> String {
    let opener = OPENERS[variant % OPENERS.len()]
        .replace("{a0}", archetype.adjectives[0])
        .replace("{a1}", archetype.adjectives[1])
        .replace("{occ}", occupation);
    format!(
        "{opener}. Their temperament is that of a {}. They spend their days as a {occupation}.",
        archetype.name.replace('_', " ")
    )
}

/// Builds `archetype_count x occupation_count` personas. The persona id is
/// `archetype_id * occupation_count + occupation_id`.
pub fn generate_corpus(
    archetype_count: usize,
    occupation_count: usize,
    seed: u64,
    ontology: &ActionOntology,
) -> Result<Vec<PersonaRecord>> {
    if !(2..=ARCHETYPES.len()).contains(&archetype_count) {
        return Err(Error::Parameter(format!(
            "archetype_count must be in 2..={}, got {archetype_count}",
            ARCHETYPES.len()
        )));
    }
    if !(2..=OCCUPATIONS.len()).contains(&occupation_count) {
        return Err(Error::Parameter(format!(
            "occupation_count must be in 2..={}, got {occupation_count}",
            OCCUPATIONS.len()
        )));
    }
    let mut out = Vec::with_capacity(archetype_count * occupation_count);
    for (a, archetype) in ARCHETYPES.iter().enumerate().take(archetype_count) {
        let big_five = BigFiveVector::new(archetype.big_five)?;
        let preferred = preferred_actions(&big_five, ontology);
        for (o, occupation) in OCCUPATIONS.iter().enumerate().take(occupation_count) {
            let id = (a * occupation_count + o) as u32;
            let variant = rng_for(seed, &[tag::CORPUS, id as u64]).random_range(0..OPENERS.len());
            out.push(PersonaRecord {
                persona_id: id,
                archetype_id: a as u32,
                occupation_id: o as u32,
                big_five,
                preferred_actions: preferred.clone(),
                text_surrogate: render_text(archetype, occupation, variant),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    UnseenOccupation,
    UnseenArchetype,
    UnseenCross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub kind: SplitKind,
    pub seed: u64,
    pub train_ids: Vec<u32>,
    pub heldout_ids: Vec<u32>,
    pub heldout_occupations: BTreeSet<u32>,
    pub heldout_archetypes: BTreeSet<u32>,
}

impl CorpusSplit {
    pub fn is_heldout(&self, id: u32) -> bool {
        self.heldout_ids.binary_search(&id).is_ok()
    }

    pub fn chance_level(&self) -> f64 {
        1.0 / self.heldout_ids.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("split: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn axis_set(
    corpus: &[PersonaRecord],
    held: &BTreeSet<u32>,
    axis: fn(&PersonaRecord) -> u32,
    what: &str,
) -> Result<()> {
    let all: BTreeSet<u32> = corpus.iter().map(axis).collect();
    if held.is_empty() {
        return Err(Error::Parameter(format!("held-out {what} set is empty")));
    }
    if let Some(bad) = held.iter().find(|h| !all.contains(h)) {
        return Err(Error::Parameter(format!(
            "held-out {what} {bad} not present in corpus"
        )));
    }
    if held.len() >= all.len() {
        return Err(Error::Parameter(format!(
            "held-out {what} set must be a strict subset ({} of {})",
            held.len(),
            all.len()
        )));
    }
    Ok(())
}

fn partition(
    corpus: &[PersonaRecord],
    kind: SplitKind,
    seed: u64,
    heldout_occupations: BTreeSet<u32>,
    heldout_archetypes: BTreeSet<u32>,
    is_heldout: impl Fn(&PersonaRecord) -> bool,
) -> CorpusSplit {
    let (mut heldout_ids, mut train_ids) = (Vec::new(), Vec::new());
    for p in corpus {
        if is_heldout(p) {
            heldout_ids.push(p.persona_id);
        } else {
            train_ids.push(p.persona_id);
        }
    }
    train_ids.sort_unstable();
    heldout_ids.sort_unstable();
    CorpusSplit {
        kind,
        seed,
        train_ids,
        heldout_ids,
        heldout_occupations,
        heldout_archetypes,
    }
}

/// Holds out every persona whose occupation is in `heldout_occupations`.
pub fn split_unseen_occupation(
    corpus: &[PersonaRecord],
    heldout_occupations: &BTreeSet<u32>,
    seed: u64,
) -> Result<CorpusSplit> {
    axis_set(corpus, heldout_occupations, |p| p.occupation_id, "occupation")?;
    Ok(partition(
        corpus,
        SplitKind::UnseenOccupation,
        seed,
        heldout_occupations.clone(),
        BTreeSet::new(),
        |p| heldout_occupations.contains(&p.occupation_id),
    ))
}

/// Holds out every persona whose archetype is in `heldout_archetypes`.
pub fn split_unseen_archetype(
    corpus: &[PersonaRecord],
    heldout_archetypes: &BTreeSet<u32>,
    seed: u64,
) -> Result<CorpusSplit> {
    axis_set(corpus, heldout_archetypes, |p| p.archetype_id, "archetype")?;
    Ok(partition(
        corpus,
        SplitKind::UnseenArchetype,
        seed,
        BTreeSet::new(),
        heldout_archetypes.clone(),
        |p| heldout_archetypes.contains(&p.archetype_id),
    ))
}

/// Holds out only personas whose occupation AND archetype are both held out.
pub fn split_unseen_cross(
    corpus: &[PersonaRecord],
    heldout_occupations: &BTreeSet<u32>,
    heldout_archetypes: &BTreeSet<u32>,
    seed: u64,
) -> Result<CorpusSplit> {
    axis_set(corpus, heldout_occupations, |p| p.occupation_id, "occupation")?;
    axis_set(corpus, heldout_archetypes, |p| p.archetype_id, "archetype")?;
    Ok(partition(
        corpus,
        SplitKind::UnseenCross,
        seed,
        heldout_occupations.clone(),
        heldout_archetypes.clone(),
        |p| {
            heldout_occupations.contains(&p.occupation_id)
                && heldout_archetypes.contains(&p.archetype_id)
        },
    ))
}

pub fn write_corpus(path: &Path, corpus: &[PersonaRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in corpus {
        let line = serde_json::to_string(p).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<PersonaRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PersonaRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        BigFiveVector::new(rec.big_five.to_array())?;
        out.push(rec);
    }
    Ok(out)
}
