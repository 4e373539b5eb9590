use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::TagLabel;
use crate::error::{Error, Result};

/// One annotated example sentence for a slot; `sp`/`ep` are 1-based
/// inclusive token positions of the slot value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exemplar {
    pub tokens: Vec<String>,
    pub sp: usize,
    pub ep: usize,
}

impl Exemplar {
    pub fn value_tokens(&self) -> &[String] {
        &self.tokens[self.sp - 1..self.ep]
    }
}

/// Prior knowledge attached to one slot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotKnowledge {
    #[serde(default)]
    pub atoms: BTreeSet<String>,
    #[serde(default)]
    pub description: Vec<String>,
    #[serde(default)]
    pub exemplars: Vec<Exemplar>,
}

/// Per-domain slot ontology: atoms, descriptions, and exemplars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainKnowledge {
    pub domain: String,
    #[serde(deserialize_with = "deserialize_slots")]
    pub slots: BTreeMap<String, SlotKnowledge>,
}

/// BTreeMap silently keeps the last entry for a duplicate key, so detect
/// duplicate slot names explicitly while deserializing.
fn deserialize_slots<'de, D>(de: D) -> std::result::Result<BTreeMap<String, SlotKnowledge>, D::Error>
where
    D: Deserializer<'de>,
{
    struct SlotsVisitor;

    impl<'de> Visitor<'de> for SlotsVisitor {
        type Value = BTreeMap<String, SlotKnowledge>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a map of slot name to slot knowledge")
        }

        fn visit_map<A: MapAccess<'de>>(
            self,
            mut access: A,
        ) -> std::result::Result<Self::Value, A::Error> {
            let mut out = BTreeMap::new();
            while let Some((key, value)) = access.next_entry::<String, SlotKnowledge>()? {
                if out.insert(key.clone(), value).is_some() {
                    return Err(serde::de::Error::custom(format!("duplicate slot `{key}`")));
                }
            }
            Ok(out)
        }
    }

    de.deserialize_map(SlotsVisitor)
}

impl DomainKnowledge {
    pub fn load(path: impl AsRef<Path>) -> Result<DomainKnowledge> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<DomainKnowledge> {
        let knowledge: DomainKnowledge = serde_json::from_str(text)
            .map_err(|e| Error::Knowledge(format!("{source}: {e}")))?;
        knowledge.validate(source)?;
        Ok(knowledge)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    fn validate(&self, source: &str) -> Result<()> {
        if self.domain.is_empty() {
            return Err(Error::Knowledge(format!("{source}: empty domain id")));
        }
        for (slot, k) in &self.slots {
            for (i, ex) in k.exemplars.iter().enumerate() {
                if ex.tokens.is_empty() {
                    return Err(Error::Knowledge(format!(
                        "{source}: slot `{slot}` exemplar {i} has no tokens"
                    )));
                }
                if !(1 <= ex.sp && ex.sp <= ex.ep && ex.ep <= ex.tokens.len()) {
                    return Err(Error::Knowledge(format!(
                        "{source}: slot `{slot}` exemplar {i} span ({}, {}) out of range for {} tokens",
                        ex.sp,
                        ex.ep,
                        ex.tokens.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonical tag set: `O` first, then `B-s`, `I-s` per slot in
    /// lexicographic slot order.
    pub fn tag_set(&self) -> Vec<TagLabel> {
        let mut tags = vec![TagLabel::Outside];
        for slot in self.slots.keys() {
            tags.push(TagLabel::Begin(slot.clone()));
            tags.push(TagLabel::Inside(slot.clone()));
        }
        tags
    }

    /// Union of all atoms used by this domain's slots, sorted.
    pub fn atom_set(&self) -> BTreeSet<String> {
        self.slots
            .values()
            .flat_map(|s| s.atoms.iter().cloned())
            .collect()
    }

    pub fn slot(&self, name: &str) -> Result<&SlotKnowledge> {
        self.slots
            .get(name)
            .ok_or_else(|| Error::Knowledge(format!("domain `{}` has no slot `{name}`", self.domain)))
    }

    /// All description tokens across slots (for vocabulary building).
    pub fn description_tokens(&self) -> Vec<String> {
        self.slots
            .values()
            .flat_map(|s| s.description.iter().cloned())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "domain": "flight",
        "slots": {
            "from_city": {
                "atoms": ["city_name", "from_location"],
                "description": ["from", "city"],
                "exemplars": [
                    {"tokens": ["flights", "leaving", "New", "York", "to", "Shanghai"], "sp": 3, "ep": 4}
                ]
            },
            "city": {
                "atoms": ["city_name"],
                "description": ["city"]
            }
        }
    }"#;

    #[test]
    fn parse_sample() {
        let k = DomainKnowledge::parse(SAMPLE, "t").unwrap();
        assert_eq!(k.domain, "flight");
        let from_city = k.slot("from_city").unwrap();
        assert_eq!(
            from_city.atoms.iter().cloned().collect::<Vec<_>>(),
            vec!["city_name".to_string(), "from_location".to_string()]
        );
        assert_eq!(k.slot("city").unwrap().atoms.len(), 1);
        let ex = &from_city.exemplars[0];
        assert_eq!(ex.value_tokens(), &["New".to_string(), "York".to_string()]);
    }

    #[test]
    fn tag_set_is_canonical() {
        let k = DomainKnowledge::parse(SAMPLE, "t").unwrap();
        let tags: Vec<String> = k.tag_set().iter().map(|t| t.to_string()).collect();
        assert_eq!(tags, vec!["O", "B-city", "I-city", "B-from_city", "I-from_city"]);
    }

    #[test]
    fn span_out_of_range_errors() {
        let bad = r#"{"domain":"d","slots":{"s":{"exemplars":[{"tokens":["a"],"sp":1,"ep":2}]}}}"#;
        let err = DomainKnowledge::parse(bad, "t").unwrap_err();
        assert!(err.to_string().contains("span"), "got {err}");
    }

    #[test]
    fn unknown_field_errors() {
        let bad = r#"{"domain":"d","slots":{},"bogus":1}"#;
        assert!(DomainKnowledge::parse(bad, "t").is_err());
        let bad2 = r#"{"domain":"d","slots":{"s":{"atom":["x"]}}}"#;
        assert!(DomainKnowledge::parse(bad2, "t").is_err());
    }

    #[test]
    fn duplicate_slot_errors() {
        let bad = r#"{"domain":"d","slots":{"s":{},"s":{}}}"#;
        let err = DomainKnowledge::parse(bad, "t").unwrap_err();
        assert!(err.to_string().contains("duplicate slot"), "got {err}");
    }
}
