//! Events in Predicate-GR form, event chains, multiple-choice instances and
//! the on-disk corpus format.
//!
//! A corpus file holds one event per line as four TAB-separated fields
//! (`subject predicate object prep_object`). Chains are separated by blank
//! lines. Only the predicate is mandatory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `{subject, predicate, object, prepositional object}` tuple.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Event {
    subject: String,
    predicate: String,
    object: String,
    prep_object: String,
}

impl Event {
    /// Builds an event, trimming every field. The predicate must be
    /// non-empty and no field may contain a TAB or newline.
    pub fn new(
        subject: impl AsRef<str>,
        predicate: impl AsRef<str>,
        object: impl AsRef<str>,
        prep_object: impl AsRef<str>,
    ) -> Result<Self> {
        let fields = [
            subject.as_ref().trim(),
            predicate.as_ref().trim(),
            object.as_ref().trim(),
            prep_object.as_ref().trim(),
        ];
        if fields[1].is_empty() {
            return Err(Error::MalformedRecord {
                line: 0,
                reason: "empty predicate".into(),
            });
        }
        if fields.iter().any(|f| f.contains(['\t', '\n', '\r'])) {
            return Err(Error::MalformedRecord {
                line: 0,
                reason: "field contains a TAB or newline".into(),
            });
        }
        Ok(Self {
            subject: fields[0].to_owned(),
            predicate: fields[1].to_owned(),
            object: fields[2].to_owned(),
            prep_object: fields[3].to_owned(),
        })
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn predicate(&self) -> &str {
        &self.predicate
    }

    pub fn object(&self) -> &str {
        &self.object
    }

    pub fn prep_object(&self) -> &str {
        &self.prep_object
    }

    /// Non-empty fields joined by single spaces, in tuple order.
    pub fn surface_form(&self) -> String {
        self.fields()
            .into_iter()
            .filter(|f| !f.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The TAB-separated corpus record for this event.
    pub fn to_record(&self) -> String {
        self.fields().join("\t")
    }

    fn fields(&self) -> [&str; 4] {
        [
            &self.subject,
            &self.predicate,
            &self.object,
            &self.prep_object,
        ]
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface_form())
    }
}

/// Parses one corpus record. Fields are whitespace-trimmed.
pub fn parse_event_record(line: &str) -> Result<Event> {
    parse_record_at(line, 0)
}

fn parse_record_at(line: &str, line_no: usize) -> Result<Event> {
    let line = line.trim_end_matches(['\n', '\r']);
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(Error::MalformedRecord {
            line: line_no,
            reason: format!("expected 4 TAB-separated fields, found {}", fields.len()),
        });
    }
    Event::new(fields[0], fields[1], fields[2], fields[3]).map_err(|e| match e {
        Error::MalformedRecord { reason, .. } => Error::MalformedRecord {
            line: line_no,
            reason,
        },
        other => other,
    })
}

/// An ordered sequence of at least two events.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventChain {
    events: Vec<Event>,
}

impl EventChain {
    pub fn new(events: Vec<Event>) -> Result<Self> {
        if events.len() < 2 {
            return Err(Error::InsufficientChain {
                len: events.len(),
                needed: 2,
            });
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Adjacent `(e_i, e_{i+1})` pairs.
    pub fn bigrams(&self) -> impl Iterator<Item = (&Event, &Event)> {
        self.events.windows(2).map(|w| (&w[0], &w[1]))
    }
}

/// Context events, candidate next events and the gold candidate index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McInstance {
    context: Vec<Event>,
    candidates: Vec<Event>,
    gold: usize,
}

impl McInstance {
    pub fn new(context: Vec<Event>, candidates: Vec<Event>, gold: usize) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::InsufficientChain { len: 0, needed: 1 });
        }
        if candidates.len() < 2 {
            return Err(Error::config(format!(
                "an instance needs at least 2 candidates, got {}",
                candidates.len()
            )));
        }
        if gold >= candidates.len() {
            return Err(Error::IndexOutOfRange {
                index: gold,
                limit: candidates.len(),
            });
        }
        let mut seen = HashSet::with_capacity(candidates.len());
        for c in &candidates {
            if !seen.insert(c) {
                return Err(Error::DuplicateCandidate(c.surface_form()));
            }
        }
        Ok(Self {
            context,
            candidates,
            gold,
        })
    }

    pub fn context(&self) -> &[Event] {
        &self.context
    }

    pub fn candidates(&self) -> &[Event] {
        &self.candidates
    }

    pub fn gold(&self) -> usize {
        self.gold
    }

    pub fn gold_event(&self) -> &Event {
        &self.candidates[self.gold]
    }

    /// The `t + 1` event sequence formed by the context and one candidate.
    pub fn sequence(&self, candidate: usize) -> Vec<Event> {
        let mut seq = self.context.clone();
        seq.push(self.candidates[candidate].clone());
        seq
    }
}

/// Builds a multiple-choice instance whose context is `chain[..t]` and whose
/// gold answer is `chain[t]`, mixed with `distractors` in seeded order.
pub fn make_mc_instance(
    chain: &EventChain,
    t: usize,
    distractors: &[Event],
    rng_seed: u64,
) -> Result<McInstance> {
    if t == 0 || chain.len() < t + 1 {
        return Err(Error::InsufficientChain {
            len: chain.len(),
            needed: t + 1,
        });
    }
    if distractors.is_empty() {
        return Err(Error::config("at least one distractor is required"));
    }
    let gold_event = &chain.events()[t];
    let mut candidates = Vec::with_capacity(distractors.len() + 1);
    candidates.push(gold_event.clone());
    candidates.extend(distractors.iter().cloned());

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    order.shuffle(&mut rng);
    let shuffled: Vec<Event> = order.iter().map(|&i| candidates[i].clone()).collect();
    let gold = order.iter().position(|&i| i == 0).expect("gold is present");

    McInstance::new(chain.events()[..t].to_vec(), shuffled, gold)
}

/// Chains read from a corpus file plus the number of blocks dropped for
/// holding fewer than two events.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub chains: Vec<EventChain>,
    pub dropped: usize,
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let mut block: Vec<Event> = Vec::new();
    let flush = |block: &mut Vec<Event>, corpus: &mut Corpus| {
        if block.is_empty() {
            return;
        }
        match EventChain::new(std::mem::take(block)) {
            Ok(chain) => corpus.chains.push(chain),
            Err(_) => corpus.dropped += 1,
        }
    };
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            flush(&mut block, &mut corpus);
            continue;
        }
        block.push(parse_record_at(line, idx + 1)?);
    }
    flush(&mut block, &mut corpus);
    Ok(corpus)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn format_corpus(chains: &[EventChain]) -> String {
    let mut out = String::new();
    for (i, chain) in chains.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for e in chain.events() {
            out.push_str(&e.to_record());
            out.push('\n');
        }
    }
    out
}

pub fn write_corpus(chains: &[EventChain], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_corpus(chains)).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct InstanceLine {
    context: Vec<Event>,
    candidates: Vec<Event>,
    gold: usize,
}

/// One JSON object per line: `{"context": [...], "candidates": [...], "gold": i}`.
pub fn format_instances(insts: &[McInstance]) -> String {
    let mut out = String::new();
    for inst in insts {
        out.push_str(&serde_json::to_string(inst).expect("instance serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_instances(text: &str) -> Result<Vec<McInstance>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let raw: InstanceLine = serde_json::from_str(l).map_err(|e| Error::MalformedRecord {
                line: i + 1,
                reason: e.to_string(),
            })?;
            let fields = |e: Event| Event::new(e.subject, e.predicate, e.object, e.prep_object);
            McInstance::new(
                raw.context.into_iter().map(fields).collect::<Result<_>>()?,
                raw.candidates.into_iter().map(fields).collect::<Result<_>>()?,
                raw.gold,
            )
        })
        .collect()
}

pub fn load_instances(path: impl AsRef<Path>) -> Result<Vec<McInstance>> {
    let path = path.as_ref();
    parse_instances(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_instances(insts: &[McInstance], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_instances(insts)).map_err(|e| Error::io(path, e))
}
