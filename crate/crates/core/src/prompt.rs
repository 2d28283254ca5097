//! Task-aware prompt rendering.
//!
//! A template is an ordered list of sections, each tagged with the job it
//! does in the prompt (role, examples, missing-value instruction, rules,
//! request, image slot). Section text carries `{name}` placeholders that are
//! bound from an [`AttributeSpec`] or, in JSON mode, from a whole [`TaskSpec`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{AttributeSpec, OutputMode, TaskSpec, ValueFormat};

const DEFAULT_SINGLE: &str = include_str!("../assets/template_single.json");
const DEFAULT_JSON: &str = include_str!("../assets/template_json.json");

/// Per-field examples shown in JSON prompts by default.
pub const DEFAULT_JSON_EXAMPLE_LIMIT: usize = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("placeholder `{{{0}}}` has no binding")]
    UnboundPlaceholder(String),
    #[error("task has no attributes")]
    EmptyTask,
    #[error("template lacks a {0:?} section")]
    MissingSection(FunctionTag),
    #[error("image data must be the single final section")]
    ImageDataNotLast,
    #[error("render_single needs a single-output task, got JSON")]
    WrongMode,
    #[error("key `{0}` collides after renaming")]
    CollisionAfterRename(String),
    #[error("template file: {0}")]
    Load(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FunctionTag {
    RoleTask,
    Example1,
    Example2,
    MissingExample,
    Rules,
    Request,
    ImageData,
}

impl FunctionTag {
    pub const ALL: [FunctionTag; 7] = [
        FunctionTag::RoleTask,
        FunctionTag::Example1,
        FunctionTag::Example2,
        FunctionTag::MissingExample,
        FunctionTag::Rules,
        FunctionTag::Request,
        FunctionTag::ImageData,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub function: FunctionTag,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptTemplate {
    sections: Vec<Section>,
}

impl<'de> Deserialize<'de> for PromptTemplate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Wire {
            sections: Vec<Section>,
        }
        let w = Wire::deserialize(d)?;
        PromptTemplate::new(w.sections).map_err(serde::de::Error::custom)
    }
}

impl PromptTemplate {
    pub fn new(sections: Vec<Section>) -> Result<Self, PromptError> {
        for tag in FunctionTag::ALL {
            if !sections.iter().any(|s| s.function == tag) {
                return Err(PromptError::MissingSection(tag));
            }
        }
        let image_sections = sections
            .iter()
            .filter(|s| s.function == FunctionTag::ImageData)
            .count();
        if image_sections != 1 || sections.last().map(|s| s.function) != Some(FunctionTag::ImageData)
        {
            return Err(PromptError::ImageDataNotLast);
        }
        Ok(Self { sections })
    }

    pub fn from_json_str(s: &str) -> Result<Self, PromptError> {
        serde_json::from_str(s).map_err(|e| PromptError::Load(e.to_string()))
    }

    pub fn from_json_file(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PromptError::Load(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Built-in template for one-attribute prompts.
    pub fn default_single() -> Self {
        Self::from_json_str(DEFAULT_SINGLE).expect("bundled template is valid")
    }

    /// Built-in template for multi-attribute JSON prompts.
    pub fn default_json() -> Self {
        Self::from_json_str(DEFAULT_JSON).expect("bundled template is valid")
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    /// Placeholder names referenced anywhere in the template.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.sections {
            for name in scan_placeholders(&s.text) {
                if !out.iter().any(|n| n == name) {
                    out.push(name.to_string());
                }
            }
        }
        out
    }

    fn image_marker(&self) -> &str {
        &self.sections.last().expect("validated non-empty").text
    }

    /// Substitutes placeholders and joins sections: rows sharing a tag are
    /// joined by a space, tag changes start a new line. The image section is
    /// returned separately as the attachment marker.
    fn render_with(&self, bindings: &Bindings) -> Result<String, PromptError> {
        let mut out = String::new();
        let mut prev: Option<FunctionTag> = None;
        for s in &self.sections {
            if s.function == FunctionTag::ImageData {
                continue;
            }
            let text = substitute(&s.text, bindings)?;
            match prev {
                None => {}
                Some(p) if p == s.function => out.push(' '),
                Some(_) => out.push('\n'),
            }
            out.push_str(&text);
            prev = Some(s.function);
        }
        Ok(out)
    }
}

/// A prompt ready to send; the image travels separately in the attachment slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    /// Marker standing in for the attached image, e.g. `<image>`.
    pub image_marker: String,
    pub task_key: String,
}

pub type Bindings = HashMap<&'static str, String>;

fn is_ident_start(c: char) -> bool {
    c.is_ascii_lowercase() || c == '_'
}

fn is_ident(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'
}

/// Yields `name` for every `{name}` token. Braces around anything that is not
/// a lowercase identifier (e.g. a JSON snippet) are literal text.
fn scan_placeholders(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || loop {
        let open = rest.find('{')?;
        let after = &rest[open + 1..];
        let end = after.find(|c: char| !is_ident(c)).unwrap_or(after.len());
        let name = &after[..end];
        let closes = after[end..].starts_with('}');
        if closes && name.chars().next().is_some_and(is_ident_start) {
            rest = &after[end + 1..];
            return Some(name);
        }
        rest = after;
    })
}

fn substitute(text: &str, bindings: &Bindings) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let end = after.find(|c: char| !is_ident(c)).unwrap_or(after.len());
        let name = &after[..end];
        if after[end..].starts_with('}') && name.chars().next().is_some_and(is_ident_start) {
            let value = bindings
                .get(name)
                .ok_or_else(|| PromptError::UnboundPlaceholder(name.to_string()))?;
            out.push_str(&rest[..open]);
            out.push_str(value);
            rest = &after[end + 1..];
        } else {
            out.push_str(&rest[..=open]);
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Answer to the fixed Starbucks / $45 / 5th April 2023 example for a format.
pub fn default_business_example(format: ValueFormat) -> &'static str {
    match format {
        ValueFormat::FreeTextShort => "Starbucks",
        ValueFormat::AmountPlain => "45",
        ValueFormat::DateYyyymmdd => "20230405",
        ValueFormat::Verbatim => "$45",
    }
}

fn business_example(attr: &AttributeSpec) -> String {
    attr.business_example
        .clone()
        .unwrap_or_else(|| default_business_example(attr.format).to_string())
}

/// Placeholder values derived from a single attribute.
pub fn single_bindings(attr: &AttributeSpec) -> Bindings {
    let mut b = Bindings::new();
    b.insert("value_placeholder", attr.display_label());
    if let Some(first) = attr.example_pairs.first() {
        b.insert("example1", first.raw.clone());
        b.insert("example1_formatted", first.formatted.clone());
    }
    b.insert("business_example_value", business_example(attr));
    b
}

pub fn render_single(attr: &AttributeSpec, template: &PromptTemplate) -> Result<RenderedPrompt, PromptError> {
    render_single_with(attr, template, &single_bindings(attr))
}

/// Renders with caller-supplied bindings, e.g. to override one placeholder.
pub fn render_single_with(
    attr: &AttributeSpec,
    template: &PromptTemplate,
    bindings: &Bindings,
) -> Result<RenderedPrompt, PromptError> {
    Ok(RenderedPrompt {
        text: template.render_with(bindings)?,
        image_marker: template.image_marker().to_string(),
        task_key: attr.key.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JsonPromptOptions {
    /// Attributes (in task order, among those with examples) that get a worked example.
    pub example_limit: usize,
}

impl Default for JsonPromptOptions {
    fn default() -> Self {
        Self {
            example_limit: DEFAULT_JSON_EXAMPLE_LIMIT,
        }
    }
}

/// Attributes that receive a per-field example in JSON mode.
pub fn json_example_subset(task: &TaskSpec, opts: JsonPromptOptions) -> Vec<&AttributeSpec> {
    task.attributes()
        .iter()
        .filter(|a| !a.example_pairs.is_empty())
        .take(opts.example_limit)
        .collect()
}

pub fn json_bindings(task: &TaskSpec, opts: JsonPromptOptions) -> Result<Bindings, PromptError> {
    if task.attributes().is_empty() {
        return Err(PromptError::EmptyTask);
    }
    let keys: Vec<String> = task
        .attributes()
        .iter()
        .map(|a| format!("\"{}\"", a.key))
        .collect();
    let subset = json_example_subset(task, opts);
    let field_examples: Vec<String> = subset
        .iter()
        .map(|a| {
            let ex = &a.example_pairs[0];
            format!(
                "For example, if the {} is {}, the \"{}\" field is \"{}\".",
                a.display_label(),
                ex.raw,
                a.key,
                ex.formatted
            )
        })
        .collect();
    let business: serde_json::Map<String, Value> = subset
        .iter()
        .map(|a| (a.key.clone(), Value::String(business_example(a))))
        .collect();
    let mut b = Bindings::new();
    b.insert("value_placeholder", "JSON object".to_string());
    b.insert("key_list", keys.join(", "));
    b.insert("field_examples", field_examples.join(" "));
    b.insert(
        "business_example_value",
        Value::Object(business).to_string(),
    );
    Ok(b)
}

pub fn render_json(task: &TaskSpec, template: &PromptTemplate) -> Result<RenderedPrompt, PromptError> {
    render_json_with(task, template, JsonPromptOptions::default())
}

pub fn render_json_with(
    task: &TaskSpec,
    template: &PromptTemplate,
    opts: JsonPromptOptions,
) -> Result<RenderedPrompt, PromptError> {
    let bindings = json_bindings(task, opts)?;
    Ok(RenderedPrompt {
        text: template.render_with(&bindings)?,
        image_marker: template.image_marker().to_string(),
        task_key: task.task_key().to_string(),
    })
}

/// Renders any task with the template matching its output mode.
pub fn render_task(
    task: &TaskSpec,
    single: &PromptTemplate,
    json: &PromptTemplate,
    opts: JsonPromptOptions,
) -> Result<RenderedPrompt, PromptError> {
    match task.output_mode() {
        OutputMode::Single => render_single(&task.attributes()[0], single),
        OutputMode::Json => render_json_with(task, json, opts),
    }
}

/// Replaces terse schema keys with self-explanatory ones, keeping order.
pub fn rename_schema_keys(
    raw_keys: &[String],
    rename_map: &BTreeMap<String, String>,
) -> Result<Vec<String>, PromptError> {
    let mut seen = HashSet::new();
    raw_keys
        .iter()
        .map(|k| {
            let out = rename_map.get(k).cloned().unwrap_or_else(|| k.clone());
            if !seen.insert(out.clone()) {
                return Err(PromptError::CollisionAfterRename(out));
            }
            Ok(out)
        })
        .collect()
}

/// Applies [`rename_schema_keys`] to every object in a JSON value.
pub fn rename_value_keys(
    value: &Value,
    rename_map: &BTreeMap<String, String>,
) -> Result<Value, PromptError> {
    Ok(match value {
        Value::Object(map) => {
            let keys: Vec<String> = map.keys().cloned().collect();
            let renamed = rename_schema_keys(&keys, rename_map)?;
            let mut out = serde_json::Map::new();
            for (new_key, (_, v)) in renamed.into_iter().zip(map) {
                out.insert(new_key, rename_value_keys(v, rename_map)?);
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(
            items
                .iter()
                .map(|v| rename_value_keys(v, rename_map))
                .collect::<Result<_, _>>()?,
        ),
        other => other.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ExamplePair;

    fn amount() -> AttributeSpec {
        AttributeSpec::new(
            "amount",
            ValueFormat::AmountPlain,
            vec![ExamplePair::new("$45", "45")],
        )
        .unwrap()
    }

    fn date() -> AttributeSpec {
        AttributeSpec::new(
            "transaction_date",
            ValueFormat::DateYyyymmdd,
            vec![ExamplePair::new("5th April 2023", "20230405")],
        )
        .unwrap()
    }

    #[test]
    fn single_amount_prompt() {
        let p = render_single(&amount(), &PromptTemplate::default_single()).unwrap();
        assert!(p.text.contains("you return 45"), "{}", p.text);
        assert!(p.text.contains("return None"));
        assert_eq!(p.task_key, "amount");
        assert_eq!(p.image_marker, "<image>");
        assert!(!p.text.contains('{'));
    }

    #[test]
    fn single_date_prompt() {
        let p = render_single(&date(), &PromptTemplate::default_single()).unwrap();
        assert!(p.text.contains("20230405"));
        assert!(p.text.contains("transaction date"));
    }

    #[test]
    fn section_order_rules_once_request_last() {
        let t = PromptTemplate::default_single();
        let p = render_single(&amount(), &t).unwrap();
        let rules = substitute(
            &t.sections().iter().find(|s| s.function == FunctionTag::Rules).unwrap().text,
            &single_bindings(&amount()),
        )
        .unwrap();
        assert_eq!(p.text.matches(&rules).count(), 1);
        assert!(p.text.ends_with("Return the amount for this invoice."));
        let lines: Vec<&str> = p.text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[0].starts_with("You are"));
        assert!(lines[2].contains("Starbucks"));
        assert!(lines[2].ends_with("you return 45."));
    }

    #[test]
    fn unbound_example_formatted() {
        let t = PromptTemplate::new(vec![
            Section { function: FunctionTag::RoleTask, text: "Return {value_placeholder}.".into() },
            Section { function: FunctionTag::Example1, text: "e.g. {example1_formatted}".into() },
            Section { function: FunctionTag::Example2, text: "x".into() },
            Section { function: FunctionTag::MissingExample, text: "return None".into() },
            Section { function: FunctionTag::Rules, text: "r".into() },
            Section { function: FunctionTag::Request, text: "q".into() },
            Section { function: FunctionTag::ImageData, text: "<image>".into() },
        ])
        .unwrap();
        let verbatim = AttributeSpec::new("total_price", ValueFormat::Verbatim, vec![]).unwrap();
        assert_eq!(
            render_single(&verbatim, &t).unwrap_err(),
            PromptError::UnboundPlaceholder("example1_formatted".into())
        );
    }

    #[test]
    fn template_structure_checked() {
        let mut sections = PromptTemplate::default_single().sections().to_vec();
        let img = sections.pop().unwrap();
        sections.insert(0, img);
        assert_eq!(PromptTemplate::new(sections.clone()).unwrap_err(), PromptError::ImageDataNotLast);
        sections.retain(|s| s.function != FunctionTag::Rules);
        assert_eq!(
            PromptTemplate::new(sections).unwrap_err(),
            PromptError::MissingSection(FunctionTag::Rules)
        );
    }

    #[test]
    fn json_braces_are_literal() {
        let names: Vec<&str> = scan_placeholders(r#"like {"a": 1} or {x} and {Y} {a_b2}"#).collect();
        assert_eq!(names, vec!["x", "a_b2"]);
        let mut b = Bindings::new();
        b.insert("x", "1".into());
        b.insert("a_b2", "2".into());
        assert_eq!(substitute(r#"{"k": {x}} {a_b2}"#, &b).unwrap(), r#"{"k": 1} 2"#);
    }

    fn cord_task(n: usize) -> TaskSpec {
        let attrs = (0..n)
            .map(|i| {
                AttributeSpec::new(
                    format!("field_{i:02}"),
                    ValueFormat::Verbatim,
                    vec![ExamplePair::new(format!("raw {i}"), format!("fmt {i}"))],
                )
                .unwrap()
            })
            .collect();
        TaskSpec::new(attrs).unwrap()
    }

    #[test]
    fn json_prompt_lists_all_keys_examples_limited() {
        let task = cord_task(24);
        let p = render_json(&task, &PromptTemplate::default_json()).unwrap();
        for i in 0..24 {
            assert!(p.text.contains(&format!("\"field_{i:02}\"")));
        }
        let examples = p.text.matches("\" field is \"").count();
        assert_eq!(examples, 5);
        assert!(!p.text.contains("raw 5,"));
        assert_eq!(p.task_key, "json_all");
    }

    #[test]
    fn json_prompt_single_attribute_and_empty() {
        let one = TaskSpec::forced_json(cord_task(1).attributes().to_vec());
        assert!(render_json(&one, &PromptTemplate::default_json()).is_ok());
        let empty = TaskSpec::forced_json(vec![]);
        assert_eq!(
            render_json(&empty, &PromptTemplate::default_json()).unwrap_err(),
            PromptError::EmptyTask
        );
    }

    #[test]
    fn rendering_is_pure() {
        let t = PromptTemplate::default_json();
        let task = cord_task(7);
        assert_eq!(render_json(&task, &t).unwrap(), render_json(&task, &t).unwrap());
    }

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    fn keys(ks: &[&str]) -> Vec<String> {
        ks.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn rename_keys() {
        let m = map(&[("nm", "name"), ("menu", "line_item")]);
        assert_eq!(
            rename_schema_keys(&keys(&["nm", "menu", "price"]), &m).unwrap(),
            keys(&["name", "line_item", "price"])
        );
        assert!(rename_schema_keys(&[], &m).unwrap().is_empty());
        let collide = map(&[("a", "x"), ("b", "x")]);
        assert_eq!(
            rename_schema_keys(&keys(&["a", "b"]), &collide).unwrap_err(),
            PromptError::CollisionAfterRename("x".into())
        );
    }

    #[test]
    fn rename_nested_values() {
        let m = map(&[("nm", "name"), ("menu", "line_item")]);
        let v: Value = serde_json::from_str(r#"{"menu":[{"nm":"Tea","price":"10.000"}]}"#).unwrap();
        let out = rename_value_keys(&v, &m).unwrap();
        assert_eq!(out, serde_json::json!({"line_item":[{"name":"Tea","price":"10.000"}]}));
    }

    proptest::proptest! {
        #[test]
        fn rename_idempotent_when_image_disjoint(
            raw in proptest::collection::btree_set("[a-e]{1,3}", 0..8),
        ) {
            let m = map(&[("a", "alpha"), ("bb", "beta"), ("c", "gamma")]);
            let raw: Vec<String> = raw.into_iter().collect();
            if let Ok(once) = rename_schema_keys(&raw, &m) {
                let twice = rename_schema_keys(&once, &m).unwrap();
                proptest::prop_assert_eq!(once, twice);
            }
        }
    }
}
