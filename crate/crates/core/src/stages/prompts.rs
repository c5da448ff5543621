//! Prompt templates, one per role tag.
//!
//! A template file holds a `[system]` section and a `[user]` section.
//! `{name}` tokens are replaced for the known placeholders only, so literal
//! JSON examples inside a template are left alone. The built-in set lives in
//! `prompts/v1/` and is compiled into the binary; a directory with the same
//! file names overrides it.

use std::collections::HashMap;
use std::path::Path;

use crate::llm::RoleTag;

pub const BUILTIN_VERSION: &str = "v1";

pub const PLACEHOLDERS: &[&str] = &[
    "user_query",
    "notes",
    "query_log",
    "chunks",
    "n_questions",
    "query",
    "hypothesis",
];

const EMPTY_VALUE: &str = "(none)";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, String> {
        let system_at = text.find("[system]").ok_or("missing [system] section")?;
        let user_at = text.find("[user]").ok_or("missing [user] section")?;
        if user_at < system_at {
            return Err("[system] must come before [user]".into());
        }
        let system = text[system_at + "[system]".len()..user_at].trim().to_string();
        let user = text[user_at + "[user]".len()..].trim().to_string();
        if system.is_empty() || user.is_empty() {
            return Err("empty prompt section".into());
        }
        Ok(Self { system, user })
    }

    /// Substitutes `vars`; empty values render as `(none)`.
    pub fn render(&self, vars: &[(&str, &str)]) -> (String, String) {
        (fill(&self.system, vars), fill(&self.user, vars))
    }
}

// Single pass, so placeholder-like text inside a value is never expanded.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let hit = vars
            .iter()
            .find(|(name, _)| tail.starts_with(name) && tail[name.len()..].starts_with('}'));
        match hit {
            Some((name, value)) => {
                debug_assert!(PLACEHOLDERS.contains(name), "unknown placeholder {name}");
                out.push_str(if value.trim().is_empty() {
                    EMPTY_VALUE
                } else {
                    value
                });
                rest = &tail[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub version: String,
    templates: HashMap<RoleTag, PromptTemplate>,
}

impl PromptSet {
    pub fn builtin() -> Self {
        let sources: [(RoleTag, &str); 6] = [
            (
                RoleTag::BrainstormQuestions,
                include_str!("../../prompts/v1/brainstorm-questions.txt"),
            ),
            (
                RoleTag::BrainstormNotes,
                include_str!("../../prompts/v1/brainstorm-notes.txt"),
            ),
            (RoleTag::HypSat, include_str!("../../prompts/v1/hyp-sat.txt")),
            (
                RoleTag::BaselineHypothesize,
                include_str!("../../prompts/v1/baseline-hypothesize.txt"),
            ),
            (
                RoleTag::BaselineSatisfy,
                include_str!("../../prompts/v1/baseline-satisfy.txt"),
            ),
            (RoleTag::Refine, include_str!("../../prompts/v1/refine.txt")),
        ];
        let templates = sources
            .into_iter()
            .map(|(role, text)| (role, PromptTemplate::parse(text).expect("builtin prompt parses")))
            .collect();
        Self {
            version: BUILTIN_VERSION.to_string(),
            templates,
        }
    }

    /// Loads `<role-tag>.txt` for every role from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, String> {
        let mut templates = HashMap::new();
        for role in RoleTag::ALL {
            let path = dir.join(format!("{}.txt", role.as_str()));
            let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let template = PromptTemplate::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            templates.insert(role, template);
        }
        let version = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Self { version, templates })
    }

    pub fn get(&self, role: RoleTag) -> &PromptTemplate {
        &self.templates[&role]
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_set_covers_every_role() {
        let set = PromptSet::builtin();
        for role in RoleTag::ALL {
            let t = set.get(role);
            assert!(!t.system.is_empty() && t.user.contains("{user_query}"), "{role}");
        }
        assert!(set.get(RoleTag::HypSat).user.contains("\"satisfied\""));
        assert!(set.get(RoleTag::BaselineSatisfy).user.contains("{hypothesis}"));
    }

    #[test]
    fn render_replaces_only_known_tokens() {
        let t =
            PromptTemplate::parse("[system]\nS {user_query}\n[user]\nQ={user_query} N={notes} {\"a\": 1}")
                .unwrap();
        let (s, u) = t.render(&[("user_query", "why?"), ("notes", "")]);
        assert_eq!(s, "S why?");
        assert_eq!(u, "Q=why? N=(none) {\"a\": 1}");
        let (_, u) = t.render(&[("user_query", "{notes}"), ("notes", "n")]);
        assert_eq!(u, "Q={notes} N=n {\"a\": 1}");
    }

    #[test]
    fn parse_errors() {
        assert!(PromptTemplate::parse("[user]\nx").is_err());
        assert!(PromptTemplate::parse("[user]\nx\n[system]\ny").is_err());
        assert!(PromptTemplate::parse("[system]\n\n[user]\nx").is_err());
    }

    #[test]
    fn directory_override_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for role in RoleTag::ALL {
            std::fs::write(
                dir.path().join(format!("{role}.txt")),
                format!("[system]\nsys {role}\n[user]\nuser {{user_query}}"),
            )
            .unwrap();
        }
        let set = PromptSet::from_dir(dir.path()).unwrap();
        assert_eq!(set.get(RoleTag::Refine).system, "sys refine");
        std::fs::remove_file(dir.path().join("refine.txt")).unwrap();
        assert!(PromptSet::from_dir(dir.path()).is_err());
    }
}
