//! Corpus ingestion, vocabulary, and encoder/decoder input layouts.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const LATENT: u32 = 4;
pub const SOP: u32 = 5;
pub const EOP: u32 = 6;
pub const SOH: u32 = 7;
pub const PER: u32 = 8;
pub const QRY: u32 = 9;
pub const RSP: u32 = 10;

pub const SPECIAL_TOKENS: [&str; 11] = [
    "[PAD]", "[BOS]", "[EOS]", "[UNK]", "[z]", "[SOP]", "[EOP]", "[SOH]", "[PER]", "[QRY]", "[RSP]",
];

pub fn is_special(id: u32) -> bool {
    (id as usize) < SPECIAL_TOKENS.len()
}

/// Lowercased word tokenization: alphanumeric runs form words, every other
/// non-space character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from raw documents. Words are ordered by
    /// descending frequency, ties broken lexicographically.
    pub fn build<'a, I>(docs: I, min_count: usize) -> Result<Vocab>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut n_docs = 0;
        for doc in docs {
            n_docs += 1;
            for tok in tokenize(doc) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if n_docs == 0 {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocab::from_tokens(
            SPECIAL_TOKENS
                .iter()
                .map(|s| s.to_string())
                .chain(words.into_iter().map(|(w, _)| w))
                .collect(),
        )
    }

    /// Wraps an id-ordered token list; the specials must come first.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Data(format!("vocabulary id {i} must be {s}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins non-special tokens with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| !is_special(i))
            .filter_map(|&i| self.token(i))
            .collect();
        detokenize(&words)
    }

    /// `vocab.txt`: one token per line, line number = id.
    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        body
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Vocab::from_tokens(text.lines().map(str::to_owned).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NliPair {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub query: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueSession {
    pub persona: Vec<String>,
    pub turns: Vec<Turn>,
}

impl DialogueSession {
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Data("dialogue session has no turns".into()));
        }
        Ok(())
    }
}

/// Parses line-delimited JSON; diagnostics carry 1-based line numbers.
pub fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str, origin: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{origin}:{}: {e}", i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn read_nli(path: &Path) -> Result<Vec<NliPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_jsonl(&text, &path.display().to_string())
}

/// Keeps entailment pairs only; they are the sole input to the entailment memory.
pub fn entailment_only(pairs: Vec<NliPair>) -> Vec<NliPair> {
    pairs
        .into_iter()
        .filter(|p| p.label == NliLabel::Entailment)
        .collect()
}

pub fn read_dialogues(path: &Path) -> Result<Vec<DialogueSession>> {
    let origin = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(origin.clone(), e))?;
    let sessions: Vec<DialogueSession> = parse_jsonl(&text, &origin)?;
    for (i, s) in sessions.iter().enumerate() {
        s.validate().map_err(|e| Error::Data(format!("{origin}: session {}: {e}", i + 1)))?;
    }
    Ok(sessions)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut body = Vec::new();
    for item in items {
        serde_json::to_writer(&mut body, item)?;
        body.push(b'\n');
    }
    write_atomic(path, &body)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let ctx = || path.display().to_string();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(ctx(), e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Data(format!("not a file path: {}", ctx())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(ctx(), e))?;
    f.write_all(bytes).map_err(|e| Error::io(ctx(), e))?;
    f.sync_all().map_err(|e| Error::io(ctx(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Latent,
    Marker,
    Premise,
    Persona,
    Query,
    Response,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    Entailment,
    Discourse,
}

/// Encoder input: ids, attention mask (true = real token) and per-token roles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub roles: Vec<Role>,
    pub layout: Layout,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends masked `[PAD]` positions up to `len`.
    pub fn padded_to(&self, len: usize) -> EncodedSequence {
        let mut out = self.clone();
        while out.ids.len() < len {
            out.ids.push(PAD);
            out.mask.push(false);
            out.roles.push(Role::Marker);
        }
        out
    }

    fn push(&mut self, id: u32, role: Role) {
        self.ids.push(id);
        self.mask.push(true);
        self.roles.push(role);
    }

    fn extend(&mut self, ids: &[u32], role: Role) {
        ids.iter().for_each(|&id| self.push(id, role));
    }

    fn new(layout: Layout) -> EncodedSequence {
        EncodedSequence {
            ids: Vec::new(),
            mask: Vec::new(),
            roles: Vec::new(),
            layout,
        }
    }
}

/// `[z] [SOP] p1 … pn [EOP]`, premise right-truncated to fit `max_len`.
pub fn assemble_erm_input(premise: &[u32], max_len: usize) -> Result<EncodedSequence> {
    if premise.is_empty() {
        return Err(Error::Data("empty premise".into()));
    }
    if max_len < 4 {
        return Err(contract(format!("max_len {max_len} cannot hold a premise")));
    }
    let keep = premise.len().min(max_len - 3);
    let mut seq = EncodedSequence::new(Layout::Entailment);
    seq.push(LATENT, Role::Latent);
    seq.push(SOP, Role::Marker);
    seq.extend(&premise[..keep], Role::Premise);
    seq.push(EOP, Role::Marker);
    Ok(seq)
}

/// `[z] [PER] C [QRY] Q1 [RSP] R1 … [QRY] Qm`.
///
/// Overflow drops the oldest history turns first, then right-truncates the
/// persona, and finally right-truncates the current query.
pub fn assemble_ddm_input(
    persona: &[Vec<u32>],
    history: &[(Vec<u32>, Vec<u32>)],
    query: &[u32],
    max_len: usize,
) -> Result<EncodedSequence> {
    if query.is_empty() {
        return Err(Error::Data("empty query".into()));
    }
    if max_len < 4 {
        return Err(contract(format!("max_len {max_len} cannot hold a query")));
    }
    let persona_ids: Vec<u32> = persona.concat();
    let turn_len = |(q, r): &(Vec<u32>, Vec<u32>)| q.len() + r.len() + 2;
    let fixed = 3 + query.len();
    let mut first_turn = 0;
    let mut hist_len: usize = history.iter().map(turn_len).sum();
    while first_turn < history.len() && fixed + persona_ids.len() + hist_len > max_len {
        hist_len -= turn_len(&history[first_turn]);
        first_turn += 1;
    }
    let persona_keep = persona_ids.len().min(max_len.saturating_sub(fixed));
    let query_keep = query.len().min(max_len - 3);

    let mut seq = EncodedSequence::new(Layout::Discourse);
    seq.push(LATENT, Role::Latent);
    seq.push(PER, Role::Marker);
    seq.extend(&persona_ids[..persona_keep], Role::Persona);
    for (q, r) in &history[first_turn..] {
        seq.push(QRY, Role::Marker);
        seq.extend(q, Role::Query);
        seq.push(RSP, Role::Marker);
        seq.extend(r, Role::Response);
    }
    seq.push(QRY, Role::Marker);
    seq.extend(&query[..query_keep], Role::Query);
    debug_assert!(seq.len() <= max_len);
    Ok(seq)
}

/// Decoder layout shared by both stages: `[SOH] [BOS] t1 … tn [EOS]`.
pub fn decoder_sequence(tokens: &[u32], max_len: usize) -> Vec<u32> {
    let keep = tokens.len().min(max_len.saturating_sub(3));
    let mut ids = Vec::with_capacity(keep + 3);
    ids.push(SOH);
    ids.push(BOS);
    ids.extend_from_slice(&tokens[..keep]);
    ids.push(EOS);
    ids
}

/// Candidate list for one turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidates<T> {
    pub items: Vec<T>,
    pub gold_index: usize,
}

/// Distinct responses available as distractors, in first-seen corpus order.
#[derive(Clone, Debug, Default)]
pub struct DistractorPool {
    responses: Vec<String>,
}

impl DistractorPool {
    pub fn from_sessions(sessions: &[DialogueSession]) -> DistractorPool {
        let mut seen = std::collections::HashSet::new();
        let responses = sessions
            .iter()
            .flat_map(|s| s.turns.iter().map(|t| t.response.clone()))
            .filter(|r| seen.insert(r.clone()))
            .collect();
        DistractorPool { responses }
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// Samples `t` distinct non-gold responses and inserts the gold at a
    /// random position among the `t + 1` candidates.
    pub fn sample<R: Rng>(&self, gold: &str, t: usize, rng: &mut R) -> Result<Candidates<String>> {
        let eligible: Vec<&String> = self.responses.iter().filter(|r| *r != gold).collect();
        if eligible.len() < t {
            return Err(Error::Data(format!(
                "distractor pool too small: {t} required, {} available",
                eligible.len()
            )));
        }
        let picks = rand::seq::index::sample(rng, eligible.len(), t);
        let mut items: Vec<String> = picks.iter().map(|i| eligible[i].clone()).collect();
        let gold_index = rng.random_range(0..=t);
        items.insert(gold_index, gold.to_owned());
        Ok(Candidates { items, gold_index })
    }
}

/// Right-padded id matrix with its mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
}

pub fn make_batch(items: &[Vec<u32>], pad_to: Option<usize>) -> Batch {
    let longest = items.iter().map(Vec::len).max().unwrap_or(0);
    let width = pad_to.unwrap_or(longest).max(longest);
    let mut ids = Vec::with_capacity(items.len());
    let mut mask = Vec::with_capacity(items.len());
    for item in items {
        let mut row = item.clone();
        row.resize(width, PAD);
        let mut m = vec![true; item.len()];
        m.resize(width, false);
        ids.push(row);
        mask.push(m);
    }
    Batch { ids, mask }
}

/// Stage-1 training item.
#[derive(Clone, Debug, PartialEq)]
pub struct EntailmentExample {
    pub premise: EncodedSequence,
    /// `[SOH] [BOS] h1 … hn [EOS]`
    pub decoder_ids: Vec<u32>,
    pub label: NliLabel,
}

impl EntailmentExample {
    pub fn from_pair(pair: &NliPair, vocab: &Vocab, max_len: usize) -> Result<EntailmentExample> {
        let hyp = vocab.encode(&pair.hypothesis);
        if hyp.is_empty() {
            return Err(Error::Data("empty hypothesis".into()));
        }
        Ok(EntailmentExample {
            premise: assemble_erm_input(&vocab.encode(&pair.premise), max_len)?,
            decoder_ids: decoder_sequence(&hyp, max_len),
            label: pair.label,
        })
    }
}

/// Stage-2 training / evaluation item for one dialogue turn.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueExample {
    /// Persona + history + query in discourse layout.
    pub context: EncodedSequence,
    /// Persona sentences concatenated as a premise in entailment layout.
    pub persona_premise: EncodedSequence,
    /// Decoder ids of every candidate; the gold one sits at `gold_index`.
    pub candidates: Vec<Vec<u32>>,
    pub gold_index: usize,
}

impl DialogueExample {
    pub fn gold(&self) -> &[u32] {
        &self.candidates[self.gold_index]
    }

    /// Response word ids of the gold candidate (no specials).
    pub fn gold_words(&self) -> &[u32] {
        let g = self.gold();
        &g[2..g.len() - 1]
    }
}

/// How distractors are obtained for turns without corpus-provided candidates.
pub enum Distractors<'a, R: Rng> {
    /// Use corpus candidates only; turns without them get just the gold.
    CorpusOnly,
    /// Sample `t` from the pool when the corpus provides none.
    Sample {
        pool: &'a DistractorPool,
        t: usize,
        rng: &'a mut R,
    },
}

pub fn persona_premise_ids(persona: &[String], vocab: &Vocab) -> Vec<u32> {
    persona.iter().flat_map(|s| vocab.encode(s)).collect()
}

/// Persona sentences concatenated into one premise; an empty persona becomes
/// a lone `[UNK]` so the entailment read always has input.
pub fn assemble_persona_premise(persona: &[Vec<u32>], max_len: usize) -> Result<EncodedSequence> {
    let ids: Vec<u32> = persona.concat();
    if ids.is_empty() {
        assemble_erm_input(&[UNK], max_len)
    } else {
        assemble_erm_input(&ids, max_len)
    }
}

/// Expands sessions into one example per turn.
pub fn build_dialogue_examples<R: Rng>(
    sessions: &[DialogueSession],
    vocab: &Vocab,
    max_len: usize,
    mut distractors: Distractors<'_, R>,
) -> Result<Vec<DialogueExample>> {
    let mut out = Vec::new();
    for session in sessions {
        session.validate()?;
        let persona: Vec<Vec<u32>> = session.persona.iter().map(|s| vocab.encode(s)).collect();
        let persona_premise = assemble_persona_premise(&persona, max_len)?;
        let mut history: Vec<(Vec<u32>, Vec<u32>)> = Vec::new();
        for turn in &session.turns {
            let q = vocab.encode(&turn.query);
            let r = vocab.encode(&turn.response);
            let context = assemble_ddm_input(&persona, &history, &q, max_len)?;
            let cands = match (&turn.candidates, &mut distractors) {
                (Some(c), Distractors::Sample { rng, .. }) if !c.is_empty() => {
                    let gold_index = rng.random_range(0..=c.len());
                    let mut items: Vec<String> = c.clone();
                    items.insert(gold_index, turn.response.clone());
                    Candidates { items, gold_index }
                }
                (Some(c), Distractors::CorpusOnly) if !c.is_empty() => {
                    // Deterministic placement: gold first.
                    let mut items = vec![turn.response.clone()];
                    items.extend(c.iter().cloned());
                    Candidates { items, gold_index: 0 }
                }
                (_, Distractors::Sample { pool, t, rng }) => pool.sample(&turn.response, *t, *rng)?,
                (_, Distractors::CorpusOnly) => Candidates {
                    items: vec![turn.response.clone()],
                    gold_index: 0,
                },
            };
            let candidates = cands
                .items
                .iter()
                .map(|c| decoder_sequence(&vocab.encode(c), max_len))
                .collect();
            out.push(DialogueExample {
                context,
                persona_premise: persona_premise.clone(),
                candidates,
                gold_index: cands.gold_index,
            });
            history.push((q, r));
        }
    }
    Ok(out)
}
