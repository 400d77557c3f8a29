use super::{tokenize_lines, AnnotatedDocument, Annotation, CorpusError, Entry, FieldLabel, TokenSpan};

/// Parses a document and its entry-per-line annotation file.
///
/// Each annotation line holds `||`-separated fields of the form
/// `key="surface" L:S L:E [L:S L:E ...]` or `key="nm"`. Spans that run over
/// several lines are split into one [`TokenSpan`] per line.
pub fn parse_i2b2(doc_id: &str, doc_text: &str, ann_text: &str) -> Result<AnnotatedDocument, CorpusError> {
    if doc_text.trim().is_empty() {
        return Err(CorpusError::EmptyDocument(doc_id.to_string()));
    }
    let mut doc = AnnotatedDocument {
        doc_id: doc_id.to_string(),
        lines: tokenize_lines(doc_text),
        entries: Vec::new(),
        source_year: None,
    };
    for (i, raw) in ann_text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let entry = parse_entry(&doc, raw, line_no)?;
        doc.entries.push(entry);
    }
    Ok(doc)
}

fn malformed(line: usize, reason: impl Into<String>) -> CorpusError {
    CorpusError::MalformedAnnotation { line, reason: reason.into() }
}

fn parse_entry(doc: &AnnotatedDocument, raw: &str, line_no: usize) -> Result<Entry, CorpusError> {
    let mut medication = None;
    let mut related: Vec<Annotation> = Vec::new();
    for field in raw.split("||") {
        let field = field.trim();
        let (key, rest) = field
            .split_once('=')
            .ok_or_else(|| malformed(line_no, format!("field without '=': {field:?}")))?;
        let key = key.trim();
        // list/narrative marker from the original release; not part of the label model
        if key == "ln" {
            continue;
        }
        let label = FieldLabel::from_key(key).ok_or_else(|| malformed(line_no, format!("unknown key {key:?}")))?;
        let rest = rest.trim_start();
        if !rest.starts_with('"') {
            return Err(malformed(line_no, format!("surface of {key} is not quoted")));
        }
        let close = rest[1..]
            .rfind('"')
            .map(|p| p + 1)
            .ok_or_else(|| malformed(line_no, format!("unterminated surface for {key}")))?;
        let surface = &rest[1..close];
        let offsets = rest[close + 1..].trim();
        if surface == "nm" && offsets.is_empty() {
            if label == FieldLabel::Medication {
                return Err(malformed(line_no, "medication cannot be \"nm\""));
            }
            continue;
        }
        let spans = parse_spans(doc, offsets, line_no)?;
        if spans.is_empty() {
            return Err(malformed(line_no, format!("{key} has a surface but no offsets")));
        }
        let ann = Annotation { label, spans, surface: surface.to_string() };
        if label == FieldLabel::Medication {
            if medication.replace(ann).is_some() {
                return Err(malformed(line_no, "duplicate m field"));
            }
        } else {
            if related.iter().any(|a| a.label == label) {
                return Err(malformed(line_no, format!("duplicate {key} field")));
            }
            related.push(ann);
        }
    }
    let medication = medication.ok_or_else(|| malformed(line_no, "entry has no m field"))?;
    Ok(Entry::new(medication, related))
}

fn parse_offset(s: &str, line_no: usize) -> Result<(usize, usize), CorpusError> {
    let (l, t) = s
        .split_once(':')
        .ok_or_else(|| malformed(line_no, format!("bad offset {s:?}")))?;
    let l: usize = l.parse().map_err(|_| malformed(line_no, format!("bad line number in {s:?}")))?;
    let t: usize = t.parse().map_err(|_| malformed(line_no, format!("bad token index in {s:?}")))?;
    if l == 0 {
        return Err(malformed(line_no, "line numbers are 1-based"));
    }
    Ok((l, t))
}

fn parse_spans(doc: &AnnotatedDocument, offsets: &str, line_no: usize) -> Result<Vec<TokenSpan>, CorpusError> {
    let items: Vec<&str> = offsets
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .collect();
    if !items.len().is_multiple_of(2) {
        return Err(malformed(line_no, "offsets must come in start/end pairs"));
    }
    let mut spans = Vec::new();
    for pair in items.chunks(2) {
        let (l1, t1) = parse_offset(pair[0], line_no)?;
        let (l2, t2) = parse_offset(pair[1], line_no)?;
        if (l2, t2) < (l1, t1) {
            return Err(malformed(line_no, format!("span end {l2}:{t2} precedes start {l1}:{t1}")));
        }
        let out_of_bounds = |span: TokenSpan| CorpusError::SpanOutOfBounds { doc_id: doc.doc_id.clone(), span };
        if l1 == l2 {
            let span = TokenSpan::new(l1, t1, t2);
            if !doc.span_in_bounds(&span) {
                return Err(out_of_bounds(span));
            }
            spans.push(span);
            continue;
        }
        for line in l1..=l2 {
            let len = doc.line_len(line).ok_or(out_of_bounds(TokenSpan::new(line, 0, 0)))?;
            let start = if line == l1 { t1 } else { 0 };
            let end = if line == l2 { t2 } else { len.saturating_sub(1) };
            if len == 0 && line != l1 && line != l2 {
                continue;
            }
            let span = TokenSpan::new(line, start, end);
            if !doc.span_in_bounds(&span) {
                return Err(out_of_bounds(span));
            }
            spans.push(span);
        }
    }
    Ok(spans)
}

/// Writes the entries of `doc` in the annotation file format.
pub fn serialize_annotations(doc: &AnnotatedDocument) -> String {
    let mut out = String::new();
    for entry in &doc.entries {
        let fields: Vec<String> = FieldLabel::FIELDS
            .iter()
            .map(|&label| {
                let key = label.key().unwrap_or_default();
                match entry.field(label) {
                    Some(ann) => {
                        let spans: Vec<String> = ann.spans.iter().map(TokenSpan::to_string).collect();
                        format!("{key}=\"{}\" {}", ann.surface, spans.join(" "))
                    }
                    None => format!("{key}=\"nm\""),
                }
            })
            .collect();
        out.push_str(&fields.join("||"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = "discharge summary\npatient stable\naspirin po daily\n";

    #[test]
    fn resolves_offsets_against_document() {
        let ann = r#"m="aspirin" 3:0 3:0||do="nm"||mo="po" 3:1 3:1||f="nm"||du="nm"||r="nm""#;
        let doc = parse_i2b2("d1", DOC, ann).unwrap();
        assert_eq!(doc.entries.len(), 1);
        let e = &doc.entries[0];
        assert_eq!(e.medication.label, FieldLabel::Medication);
        assert_eq!(e.medication.spans, vec![TokenSpan::new(3, 0, 0)]);
        assert_eq!(e.medication.surface, "aspirin");
        assert_eq!(e.related.len(), 1);
        assert_eq!(e.related[0].label, FieldLabel::Mode);
        assert_eq!(e.related[0].spans, vec![TokenSpan::new(3, 1, 1)]);
        assert_eq!(doc.surface_of(&e.related[0].spans), "po");
    }

    #[test]
    fn empty_annotation_file_gives_no_entries() {
        let doc = parse_i2b2("d1", DOC, "").unwrap();
        assert!(doc.entries.is_empty());
        assert_eq!(doc.lines.len(), 3);
    }

    #[test]
    fn out_of_range_line_is_rejected() {
        let err = parse_i2b2("d", "a b\nc d\n", r#"m="x" 99:0 99:0||do="nm""#).unwrap_err();
        assert!(matches!(err, CorpusError::SpanOutOfBounds { .. }));
        let err = parse_i2b2("d", "a b\nc d\n", r#"m="x" 1:0 1:5"#).unwrap_err();
        assert!(matches!(err, CorpusError::SpanOutOfBounds { .. }));
    }

    #[test]
    fn grammar_errors_carry_line_numbers() {
        let ann = "\nm=\"a\" 1:0 1:0\nm=aspirin 1:0 1:0\n";
        match parse_i2b2("d", "a b\n", ann).unwrap_err() {
            CorpusError::MalformedAnnotation { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e:?}"),
        }
        assert!(parse_i2b2("d", "a b\n", r#"m="a" 1:0"#).is_err());
        assert!(parse_i2b2("d", "a b\n", r#"do="a" 1:0 1:0"#).is_err());
        assert!(parse_i2b2("d", "a b\n", r#"zz="a" 1:0 1:0||m="a" 1:0 1:0"#).is_err());
        assert!(parse_i2b2("d", "a b\n", r#"m="a" 1:1 1:0"#).is_err());
    }

    #[test]
    fn multi_line_spans_split_per_line() {
        let doc = parse_i2b2("d", "a b c\nd e\n", r#"m="b c d" 1:1 2:0"#).unwrap();
        assert_eq!(
            doc.entries[0].medication.spans,
            vec![TokenSpan::new(1, 1, 2), TokenSpan::new(2, 0, 0)]
        );
    }

    #[test]
    fn comma_separated_discontiguous_spans() {
        let doc = parse_i2b2("d", "a b c d\n", r#"m="a d" 1:0 1:0,1:3 1:3||ln="list""#).unwrap();
        assert_eq!(doc.entries[0].medication.spans.len(), 2);
    }

    #[test]
    fn serialize_then_parse_round_trips() {
        let ann = r#"m="aspirin" 3:0 3:0||do="nm"||mo="po" 3:1 3:1||f="daily" 3:2 3:2||du="nm"||r="nm""#;
        let doc = parse_i2b2("d1", DOC, ann).unwrap();
        let again = parse_i2b2("d1", &doc.text(), &serialize_annotations(&doc)).unwrap();
        assert_eq!(doc, again);
    }
}
