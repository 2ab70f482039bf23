//! Slot rendering and sectioned template files.
//!
//! Slots are written `{{name}}` (required) or `{{?name}}` (optional). A line
//! holding an optional slot whose value is absent is dropped entirely, which
//! is how "(if has)" prompt lines are expressed. Angle-bracket placeholders
//! such as `<object>` are ordinary text here; they belong to seed templates.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

static SLOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{\{(\??)([a-z_]+)\}\}").unwrap());
static HEADER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\[([a-z0-9_.]+)\]\s*$").unwrap());

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unresolved slot `{0}`")]
    UnresolvedSlot(String),
    #[error("template line {line}: text before the first section header")]
    Orphan { line: usize },
    #[error("template line {line}: duplicate section `{name}`")]
    DuplicateSection { line: usize, name: String },
    #[error("missing template section `{0}`")]
    MissingSection(String),
}

/// Values for one render. Absent or empty values leave optional lines out.
#[derive(Debug, Default, Clone)]
pub struct Slots<'a>(BTreeMap<&'static str, &'a str>);

impl<'a> Slots<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, name: &'static str, value: &'a str) -> Self {
        self.0.insert(name, value);
        self
    }

    pub fn set_opt(mut self, name: &'static str, value: Option<&'a str>) -> Self {
        if let Some(v) = value {
            self.0.insert(name, v);
        }
        self
    }

    fn get(&self, name: &str) -> Option<&'a str> {
        self.0.get(name).copied().filter(|v| !v.trim().is_empty())
    }
}

pub fn render(template: &str, slots: &Slots<'_>) -> Result<String, TemplateError> {
    let mut out: Vec<String> = Vec::new();
    'lines: for line in template.lines() {
        let mut rendered = String::with_capacity(line.len());
        let mut last = 0;
        for cap in SLOT.captures_iter(line) {
            let whole = cap.get(0).unwrap();
            let optional = !cap[1].is_empty();
            let name = &cap[2];
            rendered.push_str(&line[last..whole.start()]);
            match slots.get(name) {
                Some(v) => rendered.push_str(v),
                None if optional => continue 'lines,
                None => return Err(TemplateError::UnresolvedSlot(name.to_owned())),
            }
            last = whole.end();
        }
        rendered.push_str(&line[last..]);
        out.push(rendered);
    }
    Ok(out.join("\n"))
}

/// Slot markers left in text, for hygiene checks on emitted prompts.
pub fn unresolved_markers(text: &str) -> Vec<String> {
    SLOT.find_iter(text)
        .map(|m| m.as_str().to_owned())
        .collect()
}

/// A file split into `[section]` blocks. Leading and trailing blank lines of
/// each block are trimmed; `#` lines before the first header are comments.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Sections(BTreeMap<String, String>);

impl Sections {
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut map = BTreeMap::new();
        let mut current: Option<(String, Vec<&str>)> = None;
        let flush = |cur: Option<(String, Vec<&str>)>, map: &mut BTreeMap<String, String>| {
            if let Some((name, lines)) = cur {
                let body = lines.join("\n");
                map.insert(name, body.trim_matches('\n').to_owned());
            }
        };
        for (i, line) in text.lines().enumerate() {
            if let Some(cap) = HEADER.captures(line) {
                let name = cap[1].to_owned();
                if map.contains_key(&name) || current.as_ref().is_some_and(|(n, _)| *n == name) {
                    return Err(TemplateError::DuplicateSection { line: i + 1, name });
                }
                flush(current.take(), &mut map);
                current = Some((name, Vec::new()));
            } else if let Some((_, lines)) = current.as_mut() {
                lines.push(line);
            } else if !line.trim().is_empty() && !line.starts_with('#') {
                return Err(TemplateError::Orphan { line: i + 1 });
            }
        }
        flush(current, &mut map);
        Ok(Self(map))
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    pub fn require(&self, name: &str) -> Result<&str, TemplateError> {
        self.get(name)
            .ok_or_else(|| TemplateError::MissingSection(name.to_owned()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn optional_lines_drop_when_absent() {
        let t = "a: {{x}}\nb: {{?y}}\nc";
        assert_eq!(render(t, &Slots::new().set("x", "1")).unwrap(), "a: 1\nc");
        assert_eq!(
            render(t, &Slots::new().set("x", "1").set("y", "2")).unwrap(),
            "a: 1\nb: 2\nc"
        );
        assert_eq!(
            render(t, &Slots::new().set("x", "1").set("y", "  ")).unwrap(),
            "a: 1\nc"
        );
    }

    #[test]
    fn missing_required_slot_is_an_error() {
        assert_eq!(
            render("{{x}}", &Slots::new()),
            Err(TemplateError::UnresolvedSlot("x".into()))
        );
    }

    #[test]
    fn angle_placeholders_pass_through() {
        let out = render(
            "Q: {{q}}",
            &Slots::new().set("q", "Is this <object> a <name>?"),
        )
        .unwrap();
        assert_eq!(out, "Q: Is this <object> a <name>?");
        assert!(unresolved_markers(&out).is_empty());
    }

    #[test]
    fn sections_parse() {
        let s = Sections::parse("\n[a]\nline 1\n\n[b.c]\n\nx\n\n").unwrap();
        assert_eq!(s.get("a"), Some("line 1"));
        assert_eq!(s.get("b.c"), Some("x"));
        assert!(matches!(
            Sections::parse("junk\n[a]"),
            Err(TemplateError::Orphan { line: 1 })
        ));
        assert!(matches!(
            Sections::parse("[a]\n[a]"),
            Err(TemplateError::DuplicateSection { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn rendered_output_has_no_slot_markers(x in "[^{}]{0,40}", y in proptest::option::of("[^{}]{0,40}")) {
            let t = "head\nx={{x}}\ny={{?y}}\ntail";
            let out = render(t, &Slots::new().set("x", &x).set_opt("y", y.as_deref())).unwrap_or_default();
            prop_assert!(unresolved_markers(&out).is_empty());
        }
    }
}
