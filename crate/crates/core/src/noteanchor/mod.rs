//! Rule-based stroke-onset extraction from clinical note text.
//!
//! A note first has to mention an acute event (trigger lexicon, with
//! negation and history guards). The onset is then taken from an absolute
//! clock time near the trigger, failing that from a relative expression,
//! and failing that the note's own timestamp stands in as a proxy.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const BUILTIN_LEXICON: &str = include_str!("lexicon.txt");
/// Onsets later than this past the note time are rejected.
pub const FUTURE_TOLERANCE_S: i64 = 24 * 3600;
const GUARD_WINDOW: usize = 5;
const POST_GUARD_WINDOW: usize = 3;
const DAY: i64 = 86_400;

/// One clinical note. `note_time` is epoch seconds (UTC).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub note_id: String,
    pub patient_id: String,
    pub note_time: i64,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Confidence {
    High,
    Medium,
    Low,
}

/// Which rule produced an explicit onset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    /// A stated clock time, dated by the note.
    ClockTime,
    /// "N hours ago" and similar offsets from the note time.
    Offset,
    /// A vague expression mapped to a fixed clock time by the lexicon.
    Anchor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OnsetResolution {
    Explicit {
        ts: i64,
        /// Character range of the temporal expression in the note text.
        span: (usize, usize),
        confidence: Confidence,
        rule: Rule,
    },
    Proxy {
        ts: i64,
    },
    NonEvent,
}

impl OnsetResolution {
    pub fn ts(&self) -> Option<i64> {
        match *self {
            OnsetResolution::Explicit { ts, .. } | OnsetResolution::Proxy { ts } => Some(ts),
            OnsetResolution::NonEvent => None,
        }
    }

    pub fn confidence(&self) -> Option<Confidence> {
        match *self {
            OnsetResolution::Explicit { confidence, .. } => Some(confidence),
            OnsetResolution::Proxy { .. } => Some(Confidence::Low),
            OnsetResolution::NonEvent => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            OnsetResolution::Explicit { .. } => "explicit",
            OnsetResolution::Proxy { .. } => "proxy",
            OnsetResolution::NonEvent => "non_event",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Guard {
    tokens: Vec<String>,
    window: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Anchor {
    phrase: String,
    minute_of_day: i64,
    days_back: i64,
}

/// Trigger, guard and anchor vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub version: String,
    triggers: Vec<Vec<String>>,
    guards: Vec<Guard>,
    post_guards: Vec<Vec<String>>,
    anchors: Vec<Anchor>,
}

fn words(phrase: &str) -> Vec<String> {
    tokenize(phrase).into_iter().map(|t| t.text).collect()
}

fn parse_clock(s: &str) -> Option<i64> {
    let (h, m) = s.split_once(':')?;
    let (h, m): (i64, i64) = (h.trim().parse().ok()?, m.trim().parse().ok()?);
    ((0..24).contains(&h) && (0..60).contains(&m)).then_some(h * 60 + m)
}

impl Lexicon {
    /// The lexicon compiled into the binary.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_LEXICON).expect("built-in lexicon parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Lexicon {
            version: String::new(),
            triggers: Vec::new(),
            guards: Vec::new(),
            post_guards: Vec::new(),
            anchors: Vec::new(),
        };
        let mut section = "";
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let bad = |msg: &str| Error::Parse {
                line: i + 1,
                msg: format!("lexicon: {msg}: {line:?}"),
            };
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = match &line[1..line.len() - 1] {
                    s @ ("triggers" | "guards" | "post_guards" | "anchors") => s,
                    _ => return Err(bad("unknown section")),
                };
                continue;
            }
            match section {
                "" => match line.split_once('=') {
                    Some((k, v)) if k.trim() == "version" => lex.version = v.trim().to_string(),
                    _ => return Err(bad("expected `version = ...` before the first section")),
                },
                "triggers" => lex.triggers.push(words(line)),
                "post_guards" => lex.post_guards.push(words(line)),
                "guards" => {
                    let (phrase, window) = match line.rsplit_once('@') {
                        Some((p, w)) => (p, w.trim().parse().map_err(|_| bad("bad @window"))?),
                        None => (line, GUARD_WINDOW),
                    };
                    lex.guards.push(Guard {
                        tokens: words(phrase),
                        window,
                    });
                }
                "anchors" => {
                    let (phrase, rhs) = line
                        .split_once('=')
                        .ok_or_else(|| bad("expected `phrase = HH:MM day`"))?;
                    let mut parts = rhs.split_whitespace();
                    let minute_of_day = parts
                        .next()
                        .and_then(parse_clock)
                        .ok_or_else(|| bad("bad clock time"))?;
                    let days_back = match parts.next() {
                        Some("today") => 0,
                        Some("yesterday") => 1,
                        Some("tomorrow") => -1,
                        _ => return Err(bad("day must be `today`, `yesterday` or `tomorrow`")),
                    };
                    lex.anchors.push(Anchor {
                        phrase: phrase.trim().to_lowercase(),
                        minute_of_day,
                        days_back,
                    });
                }
                _ => unreachable!(),
            }
        }
        if lex.triggers.is_empty() {
            return Err(Error::Parse {
                line: 0,
                msg: "lexicon has no triggers".into(),
            });
        }
        // longer anchors first so "yesterday evening" beats "evening"
        lex.anchors
            .sort_by(|a, b| b.phrase.len().cmp(&a.phrase.len()).then(a.phrase.cmp(&b.phrase)));
        Ok(lex)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Token {
    text: String,
    start: usize,
    end: usize,
    sentence: usize,
    clause: usize,
}

const ABBREVIATIONS: [&str; 8] = ["dr", "pt", "mr", "mrs", "ms", "approx", "st", "vs"];

fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let (mut sentence, mut clause) = (0, 0);
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = text[i..].chars().next().unwrap();
        if c.is_alphanumeric() || c == '\'' {
            let start = i;
            while i < bytes.len() {
                let c = text[i..].chars().next().unwrap();
                let joins = (c == '/' || c == ':' || c == '.')
                    && text[i + c.len_utf8()..]
                        .chars()
                        .next()
                        .is_some_and(|n| n.is_alphanumeric());
                if c.is_alphanumeric() || c == '\'' || joins {
                    i += c.len_utf8();
                } else {
                    break;
                }
            }
            tokens.push(Token {
                text: text[start..i].to_lowercase(),
                start,
                end: i,
                sentence,
                clause,
            });
            continue;
        }
        let next = text[i + c.len_utf8()..].chars().next();
        let at_gap = next.is_none_or(char::is_whitespace);
        let ends_sentence = match c {
            '!' | '?' | '\n' => true,
            ';' => at_gap,
            '.' => {
                at_gap
                    && !tokens.last().is_some_and(|t| {
                        t.end == i
                            && (t.text.chars().count() == 1
                                || t.text.contains('.')
                                || ABBREVIATIONS.contains(&t.text.as_str()))
                    })
            }
            _ => false,
        };
        if ends_sentence {
            sentence += 1;
            clause += 1;
        } else if matches!(c, ',' | ':' | '(' | ')') {
            clause += 1;
        }
        i += c.len_utf8();
    }
    tokens
}

fn matches_at(tokens: &[Token], i: usize, phrase: &[String]) -> bool {
    i + phrase.len() <= tokens.len()
        && phrase.iter().enumerate().all(|(k, w)| tokens[i + k].text == *w)
        && tokens[i..i + phrase.len()].iter().all(|t| t.clause == tokens[i].clause)
}

/// A temporal expression found in the scope.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    ts: i64,
    start: usize,
    end: usize,
    rule: Rule,
}

/// Compiled parser over a lexicon.
pub struct NoteParser {
    lexicon: Lexicon,
    clock_patterns: Vec<Regex>,
    relative: Regex,
    anchors: Vec<(Regex, Anchor)>,
    day_words: Regex,
}

impl fmt::Debug for NoteParser {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NoteParser")
            .field("lexicon", &self.lexicon.version)
            .finish()
    }
}

impl Default for NoteParser {
    fn default() -> Self {
        Self::new(Lexicon::builtin())
    }
}

fn number_word(s: &str) -> Option<f64> {
    let words = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    ];
    match s {
        "a" | "an" => Some(1.0),
        "half an" | "half a" => Some(0.5),
        "a couple of" | "couple of" => Some(2.0),
        _ => s
            .parse::<f64>()
            .ok()
            .or_else(|| words.iter().position(|w| *w == s).map(|n| n as f64)),
    }
}

impl NoteParser {
    pub fn new(lexicon: Lexicon) -> Self {
        let re = |s: &str| Regex::new(s).expect("static pattern");
        let ampm = r"(?:\s*([ap])(?:\.\s?m\.?|m\b))";
        let clock_patterns = vec![
            re(&format!(r"(?i)\b(\d{{1,2}}):([0-5]\d){ampm}?")),
            re(&format!(r"(?i)\b(\d{{1,2}})(){ampm}")),
            re(r"(?i)\b(?:at|@)\s*([01]\d|2[0-3])([0-5]\d)\b()"),
            re(r"(?i)\b([01]\d|2[0-3])([0-5]\d)\s*(?:hrs|h)\b()"),
            re(r"(?i)\b(noon|midnight)\b()()"),
        ];
        let relative = re(
            r"(?i)\b(\d+(?:\.\d+)?|an?|half an?|(?:a )?couple of|one|two|three|four|five|six|seven|eight|nine|ten|eleven|twelve)\s+(hours?|hrs?|minutes?|mins?|days?)\s+ago\b",
        );
        let anchors = lexicon
            .anchors
            .iter()
            .map(|a| {
                let body = a
                    .phrase
                    .split_whitespace()
                    .map(regex::escape)
                    .collect::<Vec<_>>()
                    .join(r"\s+");
                (re(&format!(r"(?i)\b{body}\b")), a.clone())
            })
            .collect();
        NoteParser {
            lexicon,
            clock_patterns,
            relative,
            anchors,
            day_words: re(r"(?i)\b(yesterday|last night|today|this morning)\b"),
        }
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    /// Sentences holding at least one unguarded trigger. A trigger that
    /// overlaps or directly follows a guarded one inherits its guard, so
    /// "prior new onset aphasia" is guarded as a whole.
    fn trigger_sentences(&self, tokens: &[Token]) -> Vec<usize> {
        let lex = &self.lexicon;
        let mut matches: Vec<(usize, usize)> = Vec::new();
        for i in 0..tokens.len() {
            for trig in &lex.triggers {
                if matches_at(tokens, i, trig) {
                    matches.push((i, i + trig.len()));
                }
            }
        }
        let mut hits = Vec::new();
        let mut guarded_until: Option<(usize, usize)> = None; // (clause, end token)
        for &(i, end) in &matches {
            let clause = tokens[i].clause;
            let inherited = guarded_until.is_some_and(|(c, e)| c == clause && i <= e);
            let guarded_before = lex.guards.iter().any(|g| {
                let n = g.tokens.len();
                // the guard's last token sits within g.window tokens before the trigger
                (i.saturating_sub(g.window)..i).any(|last| {
                    last + 1 >= n && {
                        let s = last + 1 - n;
                        matches_at(tokens, s, &g.tokens) && tokens[s].clause == clause
                    }
                })
            });
            let guarded_after = lex.post_guards.iter().any(|g| {
                (end..(end + POST_GUARD_WINDOW).min(tokens.len()))
                    .any(|s| tokens[s].clause == clause && matches_at(tokens, s, g))
            });
            if inherited || guarded_before || guarded_after {
                let e = guarded_until
                    .filter(|&(c, _)| c == clause)
                    .map_or(end, |(_, e)| e.max(end));
                guarded_until = Some((clause, e));
            } else {
                hits.push(tokens[i].sentence);
            }
        }
        hits.sort_unstable();
        hits.dedup();
        hits
    }

    fn clock_candidates(&self, text: &str, note_time: i64, scope: &[(usize, usize)], out: &mut Vec<Candidate>) {
        let mut taken: Vec<(usize, usize)> = Vec::new();
        let date = note_time.div_euclid(DAY) * DAY;
        let note_minute = note_time.rem_euclid(DAY) as f64 / 60.0;
        for pat in &self.clock_patterns {
            for cap in pat.captures_iter(text) {
                let m = cap.get(0).unwrap();
                let (start, end) = (m.start(), m.end());
                if taken.iter().any(|&(s, e)| start < e && s < end) {
                    continue;
                }
                taken.push((start, end));
                let Some(&(s_lo, s_hi)) = scope.iter().find(|&&(lo, hi)| start >= lo && end <= hi) else {
                    continue;
                };
                let first = cap.get(1).map_or("", |g| g.as_str()).to_lowercase();
                let minute_of_day = match first.as_str() {
                    "noon" => 12 * 60,
                    "midnight" => 0,
                    _ => {
                        let h: i64 = first.parse().unwrap_or(99);
                        let m: i64 = cap.get(2).map_or("", |g| g.as_str()).parse().unwrap_or(0);
                        let h = match cap
                            .get(3)
                            .filter(|g| !g.as_str().is_empty())
                            .map(|g| g.as_str().to_ascii_lowercase())
                        {
                            Some(ap) if (1..=12).contains(&h) => (h % 12) + if ap == "p" { 12 } else { 0 },
                            Some(_) => 99,
                            None => h,
                        };
                        if h > 23 || m > 59 {
                            continue;
                        }
                        h * 60 + m
                    }
                };
                // nearest day word in the same sentence decides the date
                let day = self
                    .day_words
                    .find_iter(&text[s_lo..s_hi])
                    .map(|d| {
                        let (ds, de) = (d.start() + s_lo, d.end() + s_lo);
                        let dist = if de <= start {
                            start - de
                        } else {
                            ds.saturating_sub(end)
                        };
                        (dist, d.as_str().to_lowercase())
                    })
                    .min();
                let ts = match day.as_ref().map(|(_, w)| w.as_str()) {
                    Some("yesterday" | "last night") => date - DAY + minute_of_day * 60,
                    Some(_) => date + minute_of_day * 60,
                    None if minute_of_day as f64 > note_minute => date - DAY + minute_of_day * 60,
                    None => date + minute_of_day * 60,
                };
                out.push(Candidate {
                    ts,
                    start,
                    end,
                    rule: Rule::ClockTime,
                });
            }
        }
    }

    fn relative_candidates(&self, text: &str, note_time: i64, scope: &[(usize, usize)], out: &mut Vec<Candidate>) {
        let in_scope = |s: usize, e: usize| scope.iter().any(|&(lo, hi)| s >= lo && e <= hi);
        for cap in self.relative.captures_iter(text) {
            let m = cap.get(0).unwrap();
            if !in_scope(m.start(), m.end()) {
                continue;
            }
            let count = cap[1].to_lowercase();
            let Some(n) = number_word(count.split_whitespace().collect::<Vec<_>>().join(" ").as_str()) else {
                continue;
            };
            let unit = cap[2].to_lowercase();
            let secs = if unit.starts_with('h') {
                3600.0
            } else if unit.starts_with('m') {
                60.0
            } else {
                DAY as f64
            };
            out.push(Candidate {
                ts: note_time - (n * secs).round() as i64,
                start: m.start(),
                end: m.end(),
                rule: Rule::Offset,
            });
        }
        let date = note_time.div_euclid(DAY) * DAY;
        let mut taken: Vec<(usize, usize)> = Vec::new();
        for (re, a) in &self.anchors {
            for m in re.find_iter(text) {
                if !in_scope(m.start(), m.end()) || taken.iter().any(|&(s, e)| m.start() < e && s < m.end()) {
                    continue;
                }
                taken.push((m.start(), m.end()));
                out.push(Candidate {
                    ts: date - a.days_back * DAY + a.minute_of_day * 60,
                    start: m.start(),
                    end: m.end(),
                    rule: Rule::Anchor,
                });
            }
        }
    }

    /// Resolve one note. Total and deterministic.
    pub fn parse_note(&self, note: &NoteRecord) -> OnsetResolution {
        let text = note.text.as_str();
        let tokens = tokenize(text);
        let hits = self.trigger_sentences(&tokens);
        if hits.is_empty() {
            return OnsetResolution::NonEvent;
        }
        // byte ranges of each sentence, from its first to last token
        let mut sentences: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for t in &tokens {
            let e = sentences.entry(t.sentence).or_insert((t.start, t.end));
            e.1 = t.end;
        }
        let mut scope: Vec<(usize, usize)> = Vec::new();
        for &s in &hits {
            for k in [s, s + 1] {
                if let Some(&r) = sentences.get(&k) {
                    if !scope.contains(&r) {
                        scope.push(r);
                    }
                }
            }
        }
        // widen each range to swallow trailing punctuation such as "a.m."
        for r in scope.iter_mut() {
            let rest = &text[r.1..];
            let extra = rest.find(|c: char| c.is_whitespace()).unwrap_or(rest.len());
            r.1 += extra;
        }

        let limit = note.note_time + FUTURE_TOLERANCE_S;
        let pick = |cands: Vec<Candidate>, confidence: Confidence| {
            cands
                .into_iter()
                .filter(|c| c.ts <= limit)
                .min_by_key(|c| (c.ts, c.start))
                .map(|c| OnsetResolution::Explicit {
                    ts: c.ts,
                    span: (text[..c.start].chars().count(), text[..c.end].chars().count()),
                    confidence,
                    rule: c.rule,
                })
        };

        let mut absolute = Vec::new();
        self.clock_candidates(text, note.note_time, &scope, &mut absolute);
        if let Some(r) = pick(absolute, Confidence::High) {
            return r;
        }
        let mut relative = Vec::new();
        self.relative_candidates(text, note.note_time, &scope, &mut relative);
        if let Some(r) = pick(relative, Confidence::Medium) {
            return r;
        }
        OnsetResolution::Proxy { ts: note.note_time }
    }
}

/// Per-patient onset chosen from all of that patient's notes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientOnset {
    pub patient_id: String,
    pub onset_epoch_s: i64,
    pub note_id: String,
    pub resolution: OnsetResolution,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub lexicon_version: String,
    pub n_notes: usize,
    pub n_patients: usize,
    /// Note counts by resolution kind.
    pub kinds: BTreeMap<String, usize>,
    /// Note counts by confidence.
    pub confidences: BTreeMap<String, usize>,
    /// Patients whose notes are all non-events.
    pub non_event_patients: Vec<String>,
}

/// Earliest explicit onset per patient, else earliest proxy; patients with
/// only non-events are listed in the report instead.
pub fn parse_corpus(parser: &NoteParser, notes: &[NoteRecord]) -> (Vec<PatientOnset>, CorpusReport) {
    let mut report = CorpusReport {
        lexicon_version: parser.lexicon().version.clone(),
        n_notes: notes.len(),
        ..Default::default()
    };
    let mut best: BTreeMap<&str, Option<PatientOnset>> = BTreeMap::new();
    for note in notes {
        let r = parser.parse_note(note);
        *report.kinds.entry(r.kind().to_string()).or_default() += 1;
        if let Some(c) = r.confidence() {
            *report.confidences.entry(format!("{c:?}").to_lowercase()).or_default() += 1;
        }
        let slot = best.entry(note.patient_id.as_str()).or_default();
        let Some(ts) = r.ts() else { continue };
        let explicit = matches!(r, OnsetResolution::Explicit { .. });
        let better = match slot {
            None => true,
            Some(cur) => {
                let cur_explicit = matches!(cur.resolution, OnsetResolution::Explicit { .. });
                (explicit && !cur_explicit) || (explicit == cur_explicit && ts < cur.onset_epoch_s)
            }
        };
        if better {
            *slot = Some(PatientOnset {
                patient_id: note.patient_id.clone(),
                onset_epoch_s: ts,
                note_id: note.note_id.clone(),
                resolution: r,
            });
        }
    }
    report.n_patients = best.len();
    let mut onsets = Vec::new();
    for (pid, o) in best {
        match o {
            Some(o) => onsets.push(o),
            None => report.non_event_patients.push(pid.to_string()),
        }
    }
    (onsets, report)
}

/// Read JSONL notes, one [`NoteRecord`] per non-blank line.
pub fn read_notes(path: &Path) -> Result<Vec<NoteRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// `patient_id,onset_epoch_s,kind,confidence,matched_span` rows.
pub fn onsets_csv(onsets: &[PatientOnset]) -> String {
    let mut out = String::from("patient_id,onset_epoch_s,kind,confidence,matched_span\n");
    for o in onsets {
        let conf = o
            .resolution
            .confidence()
            .map(|c| format!("{c:?}").to_lowercase())
            .unwrap_or_default();
        let span = match o.resolution {
            OnsetResolution::Explicit { span: (s, e), .. } => format!("{s}-{e}"),
            _ => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{conf},{span}\n",
            o.patient_id,
            o.onset_epoch_s,
            o.resolution.kind()
        ));
    }
    out
}

/// Parse the CSV written by [`onsets_csv`] into `patient_id -> epoch s`.
pub fn read_onsets_csv(text: &str) -> Result<BTreeMap<String, i64>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split(',');
        let (Some(pid), Some(ts)) = (f.next(), f.next()) else {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected patient_id,onset_epoch_s".into(),
            });
        };
        let ts = ts.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad onset {ts:?}"),
        })?;
        out.insert(pid.to_string(), ts);
    }
    Ok(out)
}
