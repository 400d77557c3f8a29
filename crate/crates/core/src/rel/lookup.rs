use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedDocument, FieldLabel};

/// Token type to its most frequent related field in training annotations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldLookup {
    table: BTreeMap<String, FieldLabel>,
}

impl FieldLookup {
    /// Counts every token of every related annotation. Ties go to the
    /// lower field code.
    pub fn build(docs: &[AnnotatedDocument]) -> Self {
        let mut pairs = Vec::new();
        for doc in docs {
            for entry in &doc.entries {
                for ann in &entry.related {
                    pairs.extend(ann.positions().filter_map(|(l, t)| doc.token(l, t)).map(|tok| (ann.label, tok)));
                }
            }
        }
        Self::from_pairs(pairs)
    }

    /// Same as [`FieldLookup::build`] over `(field, token)` occurrences.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (FieldLabel, &'a str)>) -> Self {
        let mut counts: HashMap<&str, [usize; 7]> = HashMap::new();
        for (label, tok) in pairs {
            counts.entry(tok).or_default()[label.code() as usize] += 1;
        }
        let table = counts
            .into_iter()
            .map(|(tok, c)| {
                let best = (1..7).fold(0, |b, i| if c[i] > c[b] { i } else { b });
                (tok.to_string(), FieldLabel::from_code(best as u8).expect("code < 7"))
            })
            .collect();
        FieldLookup { table }
    }

    pub fn get(&self, token: &str) -> Option<FieldLabel> {
        self.table.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

/// Assigns generated tokens to fields. A token still unmatched in some gold
/// field's multiset takes that field (first in field order); any other token
/// takes its lookup field, or is dropped when the lookup has none.
pub fn attribute_fields(
    generated: &[String],
    gold: &BTreeMap<FieldLabel, Vec<String>>,
    lookup: &FieldLookup,
) -> BTreeMap<FieldLabel, Vec<String>> {
    let mut remaining: BTreeMap<FieldLabel, HashMap<&str, usize>> = BTreeMap::new();
    for (f, toks) in gold {
        let m = remaining.entry(*f).or_default();
        for t in toks {
            *m.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut out: BTreeMap<FieldLabel, Vec<String>> = FieldLabel::RELATED.iter().map(|f| (*f, Vec::new())).collect();
    for tok in generated {
        let hit = FieldLabel::RELATED.into_iter().find(|f| {
            remaining.get_mut(f).and_then(|m| m.get_mut(tok.as_str())).is_some_and(|n| {
                if *n > 0 {
                    *n -= 1;
                    true
                } else {
                    false
                }
            })
        });
        let field = hit.or_else(|| lookup.get(tok).filter(|f| FieldLabel::RELATED.contains(f)));
        if let Some(f) = field {
            out.entry(f).or_default().push(tok.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_i2b2;

    fn training() -> Vec<AnnotatedDocument> {
        vec![parse_i2b2(
            "t",
            "aspirin 81 mg po daily\nlasix 20 mg po\nmotrin po\n",
            "m=\"aspirin\" 1:0 1:0||do=\"81 mg\" 1:1 1:2||mo=\"po\" 1:3 1:3||f=\"daily\" 1:4 1:4\n\
             m=\"lasix\" 2:0 2:0||do=\"20 mg\" 2:1 2:2||mo=\"po\" 2:3 2:3\n\
             m=\"motrin\" 3:0 3:0||do=\"po\" 3:1 3:1",
        )
        .unwrap()]
    }

    fn s(x: &[&str]) -> Vec<String> {
        x.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn most_frequent_field_wins() {
        let l = FieldLookup::build(&training());
        assert_eq!(l.get("po"), Some(FieldLabel::Mode));
        assert_eq!(l.get("mg"), Some(FieldLabel::Dosage));
        assert_eq!(l.get("daily"), Some(FieldLabel::Frequency));
        // medication tokens are not related-field tokens
        assert_eq!(l.get("aspirin"), None);
    }

    #[test]
    fn attribution() {
        let l = FieldLookup::build(&training());
        let gold: BTreeMap<_, _> = [(FieldLabel::Dosage, s(&["81", "mg"]))].into();
        let out = attribute_fields(&s(&["81", "mg", "po", "never-seen", "mg"]), &gold, &l);
        assert_eq!(out[&FieldLabel::Dosage], s(&["81", "mg", "mg"]));
        assert_eq!(out[&FieldLabel::Mode], s(&["po"]));
        let total: usize = out.values().map(Vec::len).sum();
        assert_eq!(total, 4);
    }
}
