//! Synthetic look-alike corpora for desk-scale experiments.
//!
//! Entry sentences come from templates such as
//! `Started {m} [{do}] [{mo}] [{f}] [for {du}] [for {r}]`: `{key}` slots draw
//! a phrase from the lexicon of that field, bracketed groups are emitted with
//! the configured probability of their field, and everything else is literal.
//! `<N>` inside a lexicon phrase becomes a random number.
//!
//! Documents also contain unannotated drug mentions (allergy and history
//! lists), vital-sign lines and filler so that a token's label depends on its
//! context.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{AnnotatedDocument, Annotation, CorpusError, Entry, FieldLabel, TokenSpan};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicons {
    pub medication: Vec<String>,
    pub dosage: Vec<String>,
    pub mode: Vec<String>,
    pub frequency: Vec<String>,
    pub duration: Vec<String>,
    pub reason: Vec<String>,
    pub filler: Vec<String>,
}

impl Lexicons {
    fn for_field(&self, field: FieldLabel) -> &[String] {
        match field {
            FieldLabel::Medication => &self.medication,
            FieldLabel::Dosage => &self.dosage,
            FieldLabel::Mode => &self.mode,
            FieldLabel::Frequency => &self.frequency,
            FieldLabel::Duration => &self.duration,
            FieldLabel::Reason => &self.reason,
            FieldLabel::None => &self.filler,
        }
    }
}

fn words(s: &[&str]) -> Vec<String> {
    s.iter().map(|w| w.to_string()).collect()
}

impl Default for Lexicons {
    fn default() -> Self {
        Lexicons {
            medication: words(&[
                "aspirin", "baby aspirin", "lisinopril", "metoprolol", "heparin", "insulin", "insulin glargine",
                "warfarin", "coumadin", "lasix", "furosemide", "atorvastatin", "lipitor", "plavix", "digoxin",
                "prednisone", "vancomycin", "levofloxacin", "ceftriaxone", "morphine", "oxycodone", "tylenol",
                "acetaminophen", "colace", "senna", "nexium", "protonix", "zofran", "ativan", "haldol",
                "albuterol", "lovenox", "amiodarone", "diltiazem", "hydralazine", "potassium chloride",
                "nitroglycerin", "metformin", "simvastatin", "keflex",
            ]),
            dosage: words(&[
                "<N> mg", "<N> mg", "<N> mg", "<N> units", "<N> tablets", "<N> mcg", "one tab", "<N> puffs", "<N> grams",
            ]),
            mode: words(&["po", "p.o.", "orally", "iv", "by mouth", "subcutaneously", "sl", "inhaled", "topically"]),
            frequency: words(&[
                "daily", "b.i.d.", "t.i.d.", "q.i.d.", "q.d.", "every <N> hours", "at bedtime", "twice a day",
                "q.h.s.", "prn", "<N> times daily", "every morning",
            ]),
            duration: words(&["<N> days", "<N> weeks", "one month", "two weeks", "the next week", "<N> more days"]),
            reason: words(&[
                "pain", "hypertension", "chest pain", "infection", "presumed pneumonia", "constipation",
                "atrial fibrillation", "anxiety", "nausea", "fever", "agitation", "diabetes", "heart failure",
            ]),
            filler: words(&[
                "patient", "was", "admitted", "with", "history", "of", "noted", "stable", "denies", "reports",
                "the", "and", "exam", "normal", "lungs", "clear", "heart", "regular", "abdomen", "soft",
                "tender", "no", "acute", "distress", "seen", "in", "clinic", "follow", "up", "team", "ct",
                "scan", "showed", "mild", "edema", "good", "appetite", "ambulating", "discharge", "home",
                "condition", "improved", "overnight", "labs", "unremarkable", "family", "at", "bedside",
                "course", "hospital", "complicated", "by", "echo", "ejection", "fraction", "cardiology", "consulted",
            ]),
        }
    }
}

/// Generator settings. Proportions are fractions in `[0, 1]`, indexed like
/// [`FieldLabel::RELATED`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub unannotated_docs: usize,
    pub annotated_docs: usize,
    /// Inclusive range of entries per annotated document.
    pub entries_per_doc: (usize, usize),
    pub templates: Vec<String>,
    /// Template for one item of a medication list line.
    pub list_item_template: String,
    pub lexicons: Lexicons,
    pub field_proportions: [f64; 5],
    /// Probability that the next group of entries is written as a list line.
    pub list_rate: f64,
    /// Expected number of distractor lines (allergy/history lists, vitals)
    /// per entry.
    pub distractor_rate: f64,
    /// Expected number of filler sentences per entry.
    pub filler_rate: f64,
    /// Headers of annotated medication list lines.
    pub med_list_headers: Vec<String>,
    /// Headers of list lines whose drug mentions are not annotated.
    pub unannotated_list_headers: Vec<String>,
}

/// Entry-level field proportions of the training split (dosage, mode,
/// frequency, duration, reason).
pub const TRAIN_FIELD_PROPORTIONS: [f64; 5] = [0.495, 0.377, 0.448, 0.061, 0.183];

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            unannotated_docs: 400,
            annotated_docs: 200,
            entries_per_doc: (3, 7),
            templates: words(&[
                "Started {m} [{do}] [{mo}] [{f}] [for {du}] [for {r}]",
                "Patient was given {m} [{do}] [{mo}] [{f}] [for {r}] [for {du}]",
                "Continue {m} [{do}] [{f}] [{mo}] [for {du}] [for {r}]",
                "[For {r}] we will start {m} [{do}] [{mo}] [{f}] [for {du}]",
                "She takes {m} [{do}] [{mo}] [{f}] [for {r}] [for {du}]",
                "Discharged on {m} [{do}] [{mo}] [{f}] [for {du}] [for {r}]",
            ]),
            list_item_template: "{m} [{do}] [{mo}] [{f}] [for {du}] [for {r}]".to_string(),
            lexicons: Lexicons::default(),
            field_proportions: TRAIN_FIELD_PROPORTIONS,
            list_rate: 0.3,
            distractor_rate: 0.5,
            filler_rate: 0.6,
            med_list_headers: words(&["Meds :", "Home medications :", "Discharge meds :"]),
            unannotated_list_headers: words(&["Allergies :", "Family history :", "Not taking :"]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Literal(String),
    Slot(FieldLabel),
    Group(Vec<Piece>, FieldLabel),
}

fn parse_template(template: &str) -> Result<Vec<Piece>, CorpusError> {
    let bad = |reason: &str| CorpusError::InvalidTemplate { template: template.to_string(), reason: reason.to_string() };
    let mut out = Vec::new();
    let mut group: Option<Vec<Piece>> = None;
    for raw in template.split_whitespace() {
        let mut word = raw;
        let opens = word.starts_with('[');
        if opens {
            if group.is_some() {
                return Err(bad("nested group"));
            }
            group = Some(Vec::new());
            word = &word[1..];
        }
        let closes = word.ends_with(']');
        if closes {
            word = &word[..word.len() - 1];
        }
        if !word.is_empty() {
            let piece = if word.starts_with('{') && word.ends_with('}') {
                let key = &word[1..word.len() - 1];
                Piece::Slot(FieldLabel::from_key(key).ok_or_else(|| bad("unknown slot key"))?)
            } else {
                Piece::Literal(word.to_string())
            };
            match group.as_mut() {
                Some(g) => g.push(piece),
                None => out.push(piece),
            }
        }
        if closes {
            let g = group.take().ok_or_else(|| bad("unbalanced ']'"))?;
            let slots: Vec<FieldLabel> = g
                .iter()
                .filter_map(|p| if let Piece::Slot(f) = p { Some(*f) } else { None })
                .collect();
            if slots.len() != 1 || slots[0] == FieldLabel::Medication {
                return Err(bad("a group needs exactly one non-medication slot"));
            }
            out.push(Piece::Group(g, slots[0]));
        }
    }
    if group.is_some() {
        return Err(bad("unclosed group"));
    }
    let meds = out.iter().filter(|p| matches!(p, Piece::Slot(FieldLabel::Medication))).count();
    if meds != 1 {
        return Err(bad("template needs exactly one {m} slot outside groups"));
    }
    Ok(out)
}

/// A generated token, tagged with the entry and field it belongs to.
#[derive(Debug, Clone)]
struct Tok {
    text: String,
    tag: Option<(usize, FieldLabel)>,
}

fn random_number(rng: &mut Rng) -> String {
    match rng.random_range(0..10) {
        0..=5 => rng.random_range(1..=1000).to_string(),
        6..=8 => format!("{}.{}", rng.random_range(0..=20), rng.random_range(1..=9)),
        _ => format!("{}/{}", rng.random_range(1..=3), rng.random_range(2..=4)),
    }
}

struct Generator<'a> {
    cfg: &'a SyntheticConfig,
    templates: Vec<Vec<Piece>>,
    list_item: Vec<Piece>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a SyntheticConfig) -> Result<Self, CorpusError> {
        let templates = cfg.templates.iter().map(|t| parse_template(t)).collect::<Result<Vec<_>, _>>()?;
        if templates.is_empty() {
            return Err(CorpusError::InvalidTemplate { template: String::new(), reason: "no templates".into() });
        }
        let list_item = parse_template(&cfg.list_item_template)?;
        let lex = &cfg.lexicons;
        let check = |name: &str, v: &[String]| {
            if v.is_empty() {
                Err(CorpusError::EmptyLexicon(name.to_string()))
            } else {
                Ok(())
            }
        };
        check("filler", &lex.filler)?;
        for t in templates.iter().chain(std::iter::once(&list_item)) {
            for piece in t {
                let field = match piece {
                    Piece::Slot(f) | Piece::Group(_, f) => *f,
                    Piece::Literal(_) => continue,
                };
                check(field.name(), lex.for_field(field))?;
            }
        }
        Ok(Generator { cfg, templates, list_item })
    }

    fn phrase(&self, field: FieldLabel, rng: &mut Rng) -> Vec<String> {
        let lex = self.cfg.lexicons.for_field(field);
        let phrase = lex.choose(rng).expect("lexicons checked non-empty");
        phrase
            .split_whitespace()
            .map(|w| if w == "<N>" { random_number(rng) } else { w.to_string() })
            .collect()
    }

    fn proportion(&self, field: FieldLabel) -> f64 {
        FieldLabel::RELATED
            .iter()
            .position(|f| *f == field)
            .map(|i| self.cfg.field_proportions[i])
            .unwrap_or(1.0)
    }

    fn emit(&self, pieces: &[Piece], entry: Option<usize>, rng: &mut Rng, out: &mut Vec<Tok>) {
        for piece in pieces {
            match piece {
                Piece::Literal(w) => out.push(Tok { text: w.clone(), tag: None }),
                Piece::Slot(field) => {
                    for w in self.phrase(*field, rng) {
                        out.push(Tok { text: w, tag: entry.map(|e| (e, *field)) });
                    }
                }
                Piece::Group(inner, field) => {
                    if rng.random_bool(self.proportion(*field).clamp(0.0, 1.0)) {
                        self.emit(inner, entry, rng, out);
                    }
                }
            }
        }
    }

    fn header(text: &str) -> Vec<Tok> {
        text.split_whitespace().map(|w| Tok { text: w.to_string(), tag: None }).collect()
    }

    fn list_line(&self, header: &str, first_entry: Option<usize>, items: usize, rng: &mut Rng) -> Vec<Tok> {
        let mut toks = Self::header(header);
        for i in 0..items {
            if i > 0 {
                toks.push(Tok { text: ",".into(), tag: None });
            }
            self.emit(&self.list_item, first_entry.map(|e| e + i), rng, &mut toks);
        }
        toks
    }

    fn distractor(&self, rng: &mut Rng) -> Vec<Tok> {
        if rng.random_bool(0.6) && !self.cfg.unannotated_list_headers.is_empty() {
            let header = self.cfg.unannotated_list_headers.choose(rng).unwrap().clone();
            let items = rng.random_range(1..=3);
            self.list_line(&header, None, items, rng)
        } else {
            let mut toks = Vec::new();
            let vitals = ["bp", "pulse", "temp", "rr", "sat", "weight", "glucose", "potassium", "creatinine"];
            let n = rng.random_range(2..=4);
            for i in 0..n {
                if i > 0 {
                    toks.push(Tok { text: ",".into(), tag: None });
                }
                let name = *vitals.choose(rng).unwrap();
                toks.push(Tok { text: name.into(), tag: None });
                let value = if name == "bp" {
                    format!("{}/{}", rng.random_range(90..=180), rng.random_range(50..=100))
                } else {
                    random_number(rng)
                };
                toks.push(Tok { text: value, tag: None });
            }
            toks
        }
    }

    fn filler(&self, rng: &mut Rng) -> Vec<Tok> {
        let n = rng.random_range(3..=8);
        (0..n)
            .map(|_| Tok { text: self.cfg.lexicons.filler.choose(rng).unwrap().clone(), tag: None })
            .collect()
    }

    fn document(&self, doc_id: String, rng: &mut Rng) -> AnnotatedDocument {
        let (lo, hi) = self.cfg.entries_per_doc;
        let target = rng.random_range(lo..=hi.max(lo));
        let mut sentences: Vec<Vec<Tok>> = Vec::new();
        let mut n_entries = 0;
        let maybe = |rate: f64, rng: &mut Rng| -> usize {
            // expected value `rate`, at most two
            let mut k = 0;
            let mut r = rate;
            while k < 2 && r > 0.0 && rng.random_bool(r.min(1.0)) {
                k += 1;
                r -= 1.0;
            }
            k
        };
        while n_entries < target {
            for _ in 0..maybe(self.cfg.filler_rate, rng) {
                sentences.push(self.filler(rng));
            }
            for _ in 0..maybe(self.cfg.distractor_rate, rng) {
                sentences.push(self.distractor(rng));
            }
            let remaining = target - n_entries;
            if remaining >= 2 && !self.cfg.med_list_headers.is_empty() && rng.random_bool(self.cfg.list_rate) {
                let items = rng.random_range(2..=remaining.min(3));
                let header = self.cfg.med_list_headers.choose(rng).unwrap().clone();
                sentences.push(self.list_line(&header, Some(n_entries), items, rng));
                n_entries += items;
            } else {
                let template = self.templates.choose(rng).unwrap();
                let mut toks = Vec::new();
                self.emit(template, Some(n_entries), rng, &mut toks);
                sentences.push(toks);
                n_entries += 1;
            }
        }
        if rng.random_bool(0.5) {
            sentences.push(self.filler(rng));
        }
        assemble(doc_id, sentences, n_entries, rng)
    }
}

/// Capitalizes sentence starts, terminates sentences with '.', packs one or
/// two sentences per line and resolves tagged tokens into entries.
fn assemble(doc_id: String, sentences: Vec<Vec<Tok>>, n_entries: usize, rng: &mut Rng) -> AnnotatedDocument {
    let mut lines: Vec<Vec<Tok>> = Vec::new();
    let mut pending_join = false;
    for mut sent in sentences {
        if sent.is_empty() {
            continue;
        }
        let first = &mut sent[0].text;
        let mut chars = first.chars();
        if let Some(c) = chars.next() {
            *first = c.to_uppercase().chain(chars).collect();
        }
        let last = &mut sent.last_mut().unwrap().text;
        if !last.ends_with('.') {
            last.push('.');
        }
        match lines.last_mut() {
            Some(line) if pending_join => line.extend(sent),
            _ => lines.push(sent),
        }
        pending_join = rng.random_bool(0.25);
    }

    let mut fields: Vec<[Vec<TokenSpan>; 6]> = vec![Default::default(); n_entries];
    for (li, line) in lines.iter().enumerate() {
        for (ti, tok) in line.iter().enumerate() {
            if let Some((e, f)) = tok.tag {
                let slot = &mut fields[e][f.code() as usize - 1];
                match slot.last_mut() {
                    Some(span) if span.line == li + 1 && span.end + 1 == ti => span.end = ti,
                    _ => slot.push(TokenSpan::new(li + 1, ti, ti)),
                }
            }
        }
    }
    let lines: Vec<Vec<String>> = lines.into_iter().map(|l| l.into_iter().map(|t| t.text).collect()).collect();
    let mut doc = AnnotatedDocument { doc_id, lines, entries: Vec::new(), source_year: None };
    for spans in fields {
        let mut annotations = FieldLabel::FIELDS.iter().zip(spans).filter(|(_, s)| !s.is_empty()).map(|(f, s)| {
            Annotation { label: *f, surface: doc.surface_of(&s), spans: s }
        });
        let Some(medication) = annotations.next().filter(|a| a.label == FieldLabel::Medication) else {
            continue;
        };
        let entry = Entry::new(medication, annotations.collect());
        doc.entries.push(entry);
    }
    doc
}

/// Generates `(unannotated, annotated)` documents; deterministic in `seed`.
pub fn gen_synthetic(
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<(Vec<AnnotatedDocument>, Vec<AnnotatedDocument>), CorpusError> {
    let generator = Generator::new(cfg)?;
    let mut rng = rng::stream(seed, "synthetic-corpus");
    let mut unannotated = Vec::with_capacity(cfg.unannotated_docs);
    for i in 0..cfg.unannotated_docs {
        let mut doc = generator.document(format!("syn-u{i:05}"), &mut rng);
        doc.entries.clear();
        unannotated.push(doc);
    }
    let mut annotated = Vec::with_capacity(cfg.annotated_docs);
    for i in 0..cfg.annotated_docs {
        annotated.push(generator.document(format!("syn-a{i:05}"), &mut rng));
    }
    Ok((unannotated, annotated))
}

/// Two-topic corpus with disjoint content vocabularies: documents of topic
/// `k` only use words `t{k}w{i}`. Returns the documents and the topic of each.
pub fn two_topic_corpus(
    docs_per_topic: usize,
    words_per_topic: usize,
    seed: u64,
) -> (Vec<AnnotatedDocument>, Vec<usize>) {
    let mut rng = rng::stream(seed, "two-topic-corpus");
    let mut docs = Vec::with_capacity(2 * docs_per_topic);
    let mut topics = Vec::with_capacity(2 * docs_per_topic);
    for topic in 0..2 {
        for d in 0..docs_per_topic {
            let mut lines = Vec::new();
            for _ in 0..rng.random_range(2..=4) {
                let n = rng.random_range(6..=12);
                let line: Vec<String> = (0..n)
                    .map(|_| format!("t{topic}w{}", rng.random_range(0..words_per_topic)))
                    .collect();
                lines.push(line);
            }
            docs.push(AnnotatedDocument {
                doc_id: format!("topic{topic}-{d:04}"),
                lines,
                entries: Vec::new(),
                source_year: None,
            });
            topics.push(topic);
        }
    }
    (docs, topics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::label_metrics;

    fn single_template_cfg() -> SyntheticConfig {
        let mut lex = Lexicons::default();
        lex.medication = words(&["aspirin"]);
        lex.dosage = words(&["<N> mg"]);
        lex.mode = words(&["po"]);
        SyntheticConfig {
            unannotated_docs: 0,
            annotated_docs: 1,
            entries_per_doc: (1, 1),
            templates: words(&["started {m} {do} {mo}"]),
            lexicons: lex,
            list_rate: 0.0,
            distractor_rate: 0.0,
            filler_rate: 0.0,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn single_template_trace() {
        let mut cfg = single_template_cfg();
        cfg.filler_rate = 0.0;
        let (_, docs) = gen_synthetic(&cfg, 1).unwrap();
        let doc = &docs[0];
        // the trailing filler sentence is optional; the entry is always line 1
        assert_eq!(doc.lines[0][0], "Started");
        assert_eq!(doc.lines[0][1], "aspirin");
        assert_eq!(doc.entries.len(), 1);
        let e = &doc.entries[0];
        assert_eq!(e.medication.surface, "aspirin");
        assert_eq!(e.related.len(), 2);
        let dose = e.field(FieldLabel::Dosage).unwrap();
        let num = &doc.lines[0][2];
        assert!(num.chars().next().unwrap().is_ascii_digit());
        assert_eq!(dose.surface, format!("{num} mg"));
        assert_eq!(dose.spans, vec![TokenSpan::new(1, 2, 3)]);
        assert_eq!(e.field(FieldLabel::Mode).unwrap().surface, "po.");
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SyntheticConfig { unannotated_docs: 5, annotated_docs: 5, ..Default::default() };
        let a = gen_synthetic(&cfg, 9).unwrap();
        let b = gen_synthetic(&cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&cfg, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn spans_match_surfaces_and_stay_in_bounds() {
        let cfg = SyntheticConfig { unannotated_docs: 2, annotated_docs: 30, ..Default::default() };
        let (un, ann) = gen_synthetic(&cfg, 4).unwrap();
        assert!(un.iter().all(|d| d.entries.is_empty()));
        for doc in &ann {
            assert!(!doc.entries.is_empty());
            for a in doc.entries.iter().flat_map(|e| e.annotations()) {
                assert!(a.spans.iter().all(|s| doc.span_in_bounds(s)));
                assert_eq!(doc.surface_of(&a.spans), a.surface);
            }
        }
    }

    #[test]
    fn duration_proportion_tracks_target() {
        let cfg = SyntheticConfig { unannotated_docs: 0, annotated_docs: 2000, ..Default::default() };
        let (_, docs) = gen_synthetic(&cfg, 2).unwrap();
        let report = label_metrics(&docs);
        assert!(report.entries >= 10_000, "{}", report.entries);
        assert_eq!(report.get(FieldLabel::Medication), 100.0);
        assert!((report.get(FieldLabel::Duration) - 6.1).abs() <= 1.5, "{}", report.get(FieldLabel::Duration));
        assert!((report.get(FieldLabel::Dosage) - 49.5).abs() <= 2.0);
    }

    #[test]
    fn empty_lexicon_is_an_error() {
        let mut cfg = single_template_cfg();
        cfg.lexicons.mode.clear();
        assert_eq!(gen_synthetic(&cfg, 1).unwrap_err(), CorpusError::EmptyLexicon("mode".into()));
    }

    #[test]
    fn template_grammar_errors() {
        assert!(parse_template("give [{do}]").is_err());
        assert!(parse_template("give {m} [{do}").is_err());
        assert!(parse_template("give {m} [{m}]").is_err());
        assert!(parse_template("give {m} [{do} {mo}]").is_err());
        assert!(parse_template("give {m} {zz}").is_err());
        assert_eq!(parse_template("give {m} [for {du}]").unwrap().len(), 3);
    }
}
