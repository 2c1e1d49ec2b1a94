//! Versioned prompt templates, one per role tag. Slots are written `{{name}}`.

use super::RoleTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub id: &'static str,
    pub body: &'static str,
}

const EXECUTOR: Template = Template { id: "executor.v1", body: include_str!("../../templates/executor.v1.txt") };
const EXTRACTOR: Template = Template { id: "extractor.v1", body: include_str!("../../templates/extractor.v1.txt") };
const REFACTORER: Template =
    Template { id: "refactorer.v1", body: include_str!("../../templates/refactorer.v1.txt") };
const REFINER: Template = Template { id: "refiner.v1", body: include_str!("../../templates/refiner.v1.txt") };
const CREDIT: Template = Template { id: "credit.v1", body: include_str!("../../templates/credit.v1.txt") };
const VERDICT: Template =
    Template { id: "bundle_verdict.v1", body: include_str!("../../templates/bundle_verdict.v1.txt") };
const META: Template = Template { id: "meta.v1", body: include_str!("../../templates/meta.v1.txt") };

pub fn template(role: RoleTag) -> Template {
    match role {
        RoleTag::Executor => EXECUTOR,
        RoleTag::Extractor => EXTRACTOR,
        RoleTag::Refactorer => REFACTORER,
        RoleTag::Refiner => REFINER,
        RoleTag::Credit => CREDIT,
        RoleTag::BundleVerdict => VERDICT,
        RoleTag::Meta => META,
    }
}

impl Template {
    /// Substitutes every `{{slot}}`. Panics on a slot left unfilled, which
    /// would mean a caller and a template file disagree.
    pub fn render(&self, slots: &[(&str, &str)]) -> String {
        for slot in self.slots() {
            assert!(
                slots.iter().any(|(name, _)| *name == slot),
                "template {} has unfilled slot {{{{{slot}}}}}",
                self.id
            );
        }
        // Single pass so substituted values are never rescanned.
        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body;
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            match after.find("}}") {
                Some(end) if is_slot_name(&after[..end]) => {
                    let name = &after[..end];
                    let value = slots.iter().find(|(n, _)| *n == name).map(|(_, v)| *v).unwrap_or_default();
                    out.push_str(value);
                    rest = &after[end + 2..];
                }
                _ => {
                    out.push_str("{{");
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }

    pub fn slots(&self) -> Vec<&'static str> {
        let mut found = Vec::new();
        let mut rest = self.body;
        while let Some(start) = rest.find("{{") {
            let after = &rest[start + 2..];
            match after.find("}}") {
                Some(end) if is_slot_name(&after[..end]) => {
                    found.push(&after[..end]);
                    rest = &after[end + 2..];
                }
                _ => rest = after,
            }
        }
        found
    }
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

/// Rules rendered one per line, verbatim, or `(none)`.
pub fn render_rules(rules: &[String]) -> String {
    if rules.is_empty() {
        "(none)".to_string()
    } else {
        rules.iter().map(|r| format!("- {r}")).collect::<Vec<_>>().join("\n")
    }
}
