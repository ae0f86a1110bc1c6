//! Language registry: metadata, group structure, and translation tasks.
//!
//! A registry is an ordered set of languages. English is the pivot and is
//! the only ungrouped entry; every other language belongs to exactly one
//! group, and group ids are contiguous starting at 1. The builtin registry
//! carries the 49 + 1 languages of the eight-group taxonomy; synthetic
//! registries are produced by [`crate::synth`].

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENGLISH: &str = "en";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resource {
    High,
    Mid,
    Low,
}

impl std::fmt::Display for Resource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Resource::High => write!(f, "High"),
            Resource::Mid => write!(f, "Mid"),
            Resource::Low => write!(f, "Low"),
        }
    }
}

/// Direction of a translation task relative to the English pivot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "xx-en")]
    IntoEnglish,
    #[serde(rename = "en-xx")]
    FromEnglish,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::IntoEnglish => write!(f, "xx-en"),
            Direction::FromEnglish => write!(f, "en-xx"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageInfo {
    pub code: String,
    pub script: String,
    pub family: String,
    pub subgroup: String,
    pub resource: Resource,
    /// Group id, 1-based. `None` only for English.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<u8>,
}

/// One translation task: exactly one side is English.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TranslationTask {
    pub src: String,
    pub dst: String,
}

impl TranslationTask {
    /// Parse "src-dst" task syntax, e.g. "de-en" or "en-g1l0".
    pub fn parse(s: &str) -> Result<TranslationTask> {
        let (src, dst) = s
            .split_once('-')
            .ok_or_else(|| Error::Parse(format!("task '{s}' is not of the form src-dst")))?;
        if src.is_empty() || dst.is_empty() {
            return Err(Error::Parse(format!("task '{s}' is not of the form src-dst")));
        }
        Ok(TranslationTask {
            src: src.to_string(),
            dst: dst.to_string(),
        })
    }

    pub fn direction(&self) -> Direction {
        if self.dst == ENGLISH {
            Direction::IntoEnglish
        } else {
            Direction::FromEnglish
        }
    }

    /// The non-English side of the task.
    pub fn foreign(&self) -> &str {
        match self.direction() {
            Direction::IntoEnglish => &self.src,
            Direction::FromEnglish => &self.dst,
        }
    }
}

impl std::fmt::Display for TranslationTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.src, self.dst)
    }
}

fn default_true() -> bool {
    true
}
fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    /// Whether codes must be two-letter ISO-639-1. Synthetic registries
    /// (generated codes like "g2l0") record `false` so their files load
    /// back; hand-written files default to strict.
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    iso_codes: bool,
    languages: Vec<LanguageInfo>,
}

/// Ordered language registry with group structure.
#[derive(Debug, Clone)]
pub struct Registry {
    languages: Vec<LanguageInfo>,
    index: HashMap<String, usize>,
    n_groups: u8,
    iso_codes: bool,
}

impl Registry {
    /// Build a registry from entries, validating the structural rules.
    ///
    /// `iso_codes` additionally enforces two-letter lowercase codes; it is
    /// on for the builtin table and for registry files, off for synthetic
    /// registries whose codes are generated.
    pub fn from_entries(languages: Vec<LanguageInfo>, iso_codes: bool) -> Result<Registry> {
        let mut index = HashMap::new();
        for (i, lang) in languages.iter().enumerate() {
            let code = &lang.code;
            if code.is_empty()
                || !code
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
            {
                return Err(Error::Validation(format!(
                    "code '{code}' must be lowercase ASCII alphanumeric"
                )));
            }
            if iso_codes && code.len() != 2 {
                return Err(Error::Validation(format!(
                    "code '{code}' is not a two-letter ISO-639-1 code"
                )));
            }
            if index.insert(code.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate language code '{code}'")));
            }
            match (code == ENGLISH, lang.group) {
                (true, Some(_)) => {
                    return Err(Error::Validation("'en' must not carry a group".into()))
                }
                (false, None) => {
                    return Err(Error::Validation(format!("'{code}' is missing a group")))
                }
                _ => {}
            }
        }
        if !index.contains_key(ENGLISH) {
            return Err(Error::Validation("registry must contain 'en'".into()));
        }
        let mut counts: HashMap<u8, usize> = HashMap::new();
        for lang in &languages {
            if let Some(g) = lang.group {
                *counts.entry(g).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Validation(
                "registry must contain at least one grouped language".into(),
            ));
        }
        let n_groups = *counts.keys().max().unwrap();
        for g in 1..=n_groups {
            if !counts.contains_key(&g) {
                return Err(Error::Validation(format!(
                    "groups must be contiguous from 1: group {g} is empty"
                )));
            }
        }
        if counts.keys().any(|&g| g == 0) {
            return Err(Error::Validation("group ids start at 1".into()));
        }
        Ok(Registry {
            languages,
            index,
            n_groups,
            iso_codes,
        })
    }

    /// The eight-group builtin registry.
    pub fn builtin() -> Registry {
        let languages = BUILTIN
            .iter()
            .map(|&(code, script, family, subgroup, resource, group)| LanguageInfo {
                code: code.to_string(),
                script: script.to_string(),
                family: family.to_string(),
                subgroup: subgroup.to_string(),
                resource,
                group: if group == 0 { None } else { Some(group) },
            })
            .collect();
        Registry::from_entries(languages, true).expect("builtin registry is valid")
    }

    pub fn from_json_str(json: &str) -> Result<Registry> {
        let file: RegistryFile =
            serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))?;
        Registry::from_entries(file.languages, file.iso_codes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Registry> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Registry::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }

    pub fn to_json(&self) -> String {
        let file = RegistryFile {
            iso_codes: self.iso_codes,
            languages: self.languages.clone(),
        };
        serde_json::to_string_pretty(&file).expect("registry serializes")
    }

    pub fn get(&self, code: &str) -> Result<&LanguageInfo> {
        self.index
            .get(code)
            .map(|&i| &self.languages[i])
            .ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    pub fn contains(&self, code: &str) -> bool {
        self.index.contains_key(code)
    }

    /// Group id of a non-English language.
    pub fn group_of(&self, code: &str) -> Result<u8> {
        let info = self.get(code)?;
        info.group.ok_or(Error::EnglishUngrouped)
    }

    /// All languages in registry order, English included.
    pub fn languages(&self) -> &[LanguageInfo] {
        &self.languages
    }

    /// Non-English languages in registry order.
    pub fn non_english(&self) -> impl Iterator<Item = &LanguageInfo> {
        self.languages.iter().filter(|l| l.code != ENGLISH)
    }

    pub fn n_groups(&self) -> u8 {
        self.n_groups
    }

    pub fn n_non_english(&self) -> usize {
        self.languages.len() - 1
    }

    /// Member codes of a group, in registry order.
    pub fn group_members(&self, group: u8) -> Vec<&str> {
        self.languages
            .iter()
            .filter(|l| l.group == Some(group))
            .map(|l| l.code.as_str())
            .collect()
    }

    /// Group sizes indexed by group id (ascending from 1).
    pub fn group_sizes(&self) -> Vec<usize> {
        (1..=self.n_groups)
            .map(|g| self.languages.iter().filter(|l| l.group == Some(g)).count())
            .collect()
    }

    /// Validate a task against this registry: known codes, exactly one 'en'.
    pub fn task(&self, src: &str, dst: &str) -> Result<TranslationTask> {
        self.get(src)?;
        self.get(dst)?;
        if src == dst {
            return Err(Error::Validation(format!("task {src}-{dst} has equal sides")));
        }
        if (src == ENGLISH) == (dst == ENGLISH) {
            return Err(Error::Validation(format!(
                "task {src}-{dst} must have exactly one English side"
            )));
        }
        Ok(TranslationTask {
            src: src.to_string(),
            dst: dst.to_string(),
        })
    }

    pub fn parse_task(&self, s: &str) -> Result<TranslationTask> {
        let t = TranslationTask::parse(s)?;
        self.task(&t.src, &t.dst)
    }

    /// Both tasks of a language: into English first, then out of it.
    pub fn tasks_of(&self, code: &str) -> Result<[TranslationTask; 2]> {
        self.group_of(code)?;
        Ok([
            self.task(code, ENGLISH)?,
            self.task(ENGLISH, code)?,
        ])
    }

    /// Every task in canonical order: registry language order, into-English
    /// before from-English per language.
    pub fn all_tasks(&self) -> Vec<TranslationTask> {
        self.non_english()
            .flat_map(|l| {
                let code = l.code.clone();
                [
                    TranslationTask {
                        src: code.clone(),
                        dst: ENGLISH.to_string(),
                    },
                    TranslationTask {
                        src: ENGLISH.to_string(),
                        dst: code,
                    },
                ]
            })
            .collect()
    }
}

pub fn group_name(group: u8) -> &'static str {
    match group {
        1 => "Germanic Languages",
        2 => "Romance Languages",
        3 => "Eastern and Southern Slavic Languages",
        4 => "Southeast Asian Languages",
        5 => "Central and Eastern European Languages",
        6 => "Eurasian Language Mix",
        7 => "Indo-Aryan Languages",
        8 => "Turkic and Semitic Languages",
        _ => "Unnamed Group",
    }
}

use Resource::{High, Low, Mid};

/// (code, script, family, subgroup, resource, group); group 0 marks English.
const BUILTIN: &[(&str, &str, &str, &str, Resource, u8)] = &[
    ("en", "Latin", "Indo-European", "Germanic", High, 0),
    // Group 1: Germanic
    ("af", "Latin", "Indo-European", "Germanic", Mid, 1),
    ("da", "Latin", "Indo-European", "Germanic", Mid, 1),
    ("nl", "Latin", "Indo-European", "Germanic", High, 1),
    ("de", "Latin", "Indo-European", "Germanic", High, 1),
    ("is", "Latin", "Indo-European", "Germanic", Low, 1),
    ("no", "Latin", "Indo-European", "Germanic", Low, 1),
    ("sv", "Latin", "Indo-European", "Germanic", High, 1),
    // Group 2: Romance
    ("ca", "Latin", "Indo-European", "Italic", High, 2),
    ("gl", "Latin", "Indo-European", "Italic", Mid, 2),
    ("it", "Latin", "Indo-European", "Italic", High, 2),
    ("pt", "Latin", "Indo-European", "Italic", High, 2),
    ("ro", "Latin", "Indo-European", "Italic", Mid, 2),
    ("es", "Latin", "Indo-European", "Italic", High, 2),
    // Group 3: Eastern and Southern Slavic
    ("bg", "Cyrillic", "Indo-European", "Balto-Slavic", Mid, 3),
    ("mk", "Cyrillic", "Indo-European", "Balto-Slavic", Low, 3),
    ("ru", "Cyrillic", "Indo-European", "Balto-Slavic", High, 3),
    ("sr", "Cyrillic", "Indo-European", "Balto-Slavic", High, 3),
    ("uk", "Cyrillic", "Indo-European", "Balto-Slavic", Mid, 3),
    // Group 4: Southeast Asian
    ("fr", "Latin", "Indo-European", "Italic", High, 4),
    ("id", "Latin", "Austronesian", "Malayo-Polynesian", Mid, 4),
    ("mg", "Latin", "Austronesian", "Malayo-Polynesian", Low, 4),
    ("ms", "Latin", "Austronesian", "Malayo-Polynesian", Mid, 4),
    ("th", "Thai", "Tai-Kadai", "Kam-Tai", Mid, 4),
    ("vi", "Latin", "Austronesian", "Vietic", High, 4),
    // Group 5: Central and Eastern European
    ("cs", "Latin", "Indo-European", "Balto-Slavic", Mid, 5),
    ("el", "Greek", "Indo-European", "Graeco-Phrygian", Mid, 5),
    ("hu", "Latin", "Uralic", "Finnic", High, 5),
    ("lv", "Latin", "Indo-European", "Balto-Slavic", Mid, 5),
    ("lt", "Latin", "Indo-European", "Balto-Slavic", Mid, 5),
    ("pl", "Latin", "Indo-European", "Balto-Slavic", High, 5),
    // Group 6: Eurasian mix
    ("zh", "Han", "Sino-Tibetan", "Sinitic", High, 6),
    ("et", "Latin", "Uralic", "Finnic", Mid, 6),
    ("fi", "Latin", "Uralic", "Finnic", High, 6),
    ("ka", "Georgian", "Kartvelian", "Georgian-Zan", Mid, 6),
    ("ja", "Japanese", "Japonic", "Japanesic", High, 6),
    ("ko", "Hangul", "Koreanic", "Korean", High, 6),
    // Group 7: Indo-Aryan
    ("gu", "Gujarati", "Indo-European", "Indo-Aryan", Low, 7),
    ("hi", "Devanagari", "Indo-European", "Indo-Aryan", High, 7),
    ("mr", "Devanagari", "Indo-European", "Indo-Aryan", Low, 7),
    ("ne", "Devanagari", "Indo-European", "Indo-Aryan", Low, 7),
    ("ur", "Arabic", "Indo-European", "Indo-Aryan", Mid, 7),
    // Group 8: Turkic and Semitic
    ("ar", "Arabic", "Afro-Asiatic", "Semitic", High, 8),
    ("az", "Arabic/Latin", "Turkic", "Common Turkic", Low, 8),
    ("he", "Hebrew", "Afro-Asiatic", "Semitic", Mid, 8),
    ("kk", "Cyrillic", "Turkic", "Common Turkic", Mid, 8),
    ("ky", "Cyrillic", "Turkic", "Common Turkic", Low, 8),
    ("fa", "Arabic", "Indo-European", "Iranian", High, 8),
    ("tr", "Latin", "Turkic", "Common Turkic", High, 8),
    ("uz", "Latin", "Turkic", "Common Turkic", Low, 8),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_counts() {
        let reg = Registry::builtin();
        assert_eq!(reg.languages().len(), 50);
        assert_eq!(reg.n_non_english(), 49);
        assert_eq!(reg.n_groups(), 8);
        assert_eq!(reg.group_sizes(), vec![7, 6, 5, 6, 6, 6, 5, 8]);
    }

    #[test]
    fn builtin_spot_checks() {
        let reg = Registry::builtin();
        let de = reg.get("de").unwrap();
        assert_eq!((de.group, de.resource), (Some(1), Resource::High));
        let zh = reg.get("zh").unwrap();
        assert_eq!((zh.group, zh.resource), (Some(6), Resource::High));
        let az = reg.get("az").unwrap();
        assert_eq!((az.group, az.resource), (Some(8), Resource::Low));
        assert_eq!(az.script, "Arabic/Latin");
        assert!(reg.contains("no"));
    }

    #[test]
    fn english_is_ungrouped() {
        let reg = Registry::builtin();
        assert!(matches!(reg.group_of("en"), Err(Error::EnglishUngrouped)));
        assert_eq!(reg.group_of("de").unwrap(), 1);
        assert!(matches!(
            reg.group_of("xx"),
            Err(Error::UnknownLanguage(_))
        ));
    }

    #[test]
    fn task_rules() {
        let reg = Registry::builtin();
        let t = reg.parse_task("de-en").unwrap();
        assert_eq!(t.direction(), Direction::IntoEnglish);
        assert_eq!(t.foreign(), "de");
        let t = reg.parse_task("en-zh").unwrap();
        assert_eq!(t.direction(), Direction::FromEnglish);
        assert_eq!(t.foreign(), "zh");
        assert!(reg.parse_task("de-zh").is_err());
        assert!(reg.parse_task("en-en").is_err());
        assert!(reg.parse_task("qq-en").is_err());
        assert!(reg.parse_task("de").is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let reg = Registry::builtin();
        let json = reg.to_json();
        let back = Registry::from_json_str(&json).unwrap();
        assert_eq!(back.languages(), reg.languages());

        let bad = json.replacen("\"script\"", "\"scrapt\"", 1);
        assert!(matches!(Registry::from_json_str(&bad), Err(Error::Parse(_))));
    }

    #[test]
    fn validation_rejects_structural_errors() {
        let mk = |code: &str, group: Option<u8>| LanguageInfo {
            code: code.into(),
            script: "Latin".into(),
            family: "F".into(),
            subgroup: "S".into(),
            resource: Resource::High,
            group,
        };
        // missing en
        assert!(Registry::from_entries(vec![mk("de", Some(1))], true).is_err());
        // grouped en
        assert!(Registry::from_entries(vec![mk("en", Some(1)), mk("de", Some(1))], true).is_err());
        // ungrouped non-en
        assert!(Registry::from_entries(vec![mk("en", None), mk("de", None)], true).is_err());
        // duplicate code
        assert!(Registry::from_entries(
            vec![mk("en", None), mk("de", Some(1)), mk("de", Some(1))],
            true
        )
        .is_err());
        // empty group 1
        assert!(Registry::from_entries(vec![mk("en", None), mk("de", Some(2))], true).is_err());
        // non-ISO code in ISO mode
        assert!(Registry::from_entries(vec![mk("en", None), mk("deu", Some(1))], true).is_err());
        // ... but fine in synthetic mode
        assert!(Registry::from_entries(vec![mk("en", None), mk("g1l0", Some(1))], false).is_ok());
        // en must still be ungrouped in synthetic mode
        assert!(
            Registry::from_entries(vec![mk("en", Some(1)), mk("g1l0", Some(1))], false).is_err()
        );
    }

    #[test]
    fn group_members_in_registry_order() {
        let reg = Registry::builtin();
        assert_eq!(
            reg.group_members(1),
            vec!["af", "da", "nl", "de", "is", "no", "sv"]
        );
        assert_eq!(reg.group_members(8).len(), 8);
    }

    #[test]
    fn all_tasks_order_and_count() {
        let reg = Registry::builtin();
        let tasks = reg.all_tasks();
        assert_eq!(tasks.len(), 98);
        assert_eq!(tasks[0].to_string(), "af-en");
        assert_eq!(tasks[1].to_string(), "en-af");
    }
}
