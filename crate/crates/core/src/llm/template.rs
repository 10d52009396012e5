//! Instruction templates and the captioning query pool.
//!
//! | id              | template                                                                                 |
//! |-----------------|------------------------------------------------------------------------------------------|
//! | `caption`       | `USER: <image>{query} Assistant:`                                                        |
//! | `llava-qa-1`    | `USER: Please answer question from this image: <image> Question: {question} Assistant:`  |
//! | `llava-qa-2`    | `USER: Image: <image> Question: {question} Assistant:`                                   |
//! | `llava-qa-3`    | `USER: Answer question {question} through the image <image> Assistant:`                  |
//! | `vqa`           | `USER: Image: <image> Question: {question} Short answer: Assistant:`                     |
//! | `vqa-option`    | `USER: Image: <image> Question: {question} Answer the option’s letter. Assistant:`       |
//! | `instruction`   | `USER: <Img><image></Img> {instruction} Assistant:`                                      |
//! | `dialogue`      | `USER: {history} Assistant:`                                                             |
//! | `dialogue-photo`| `USER: {history} <Img>{photo}</Img> {history_after} Assistant:`                          |
//!
//! Segments are separated by one space and nothing follows `Assistant:`. The
//! encoder-decoder model uses `Human:` in place of `USER:`.

use super::LlmVariant;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

pub const TEMPLATES: [(&str, &str); 9] = [
    ("caption", "USER: <image>{query} Assistant:"),
    ("llava-qa-1", "USER: Please answer question from this image: <image> Question: {question} Assistant:"),
    ("llava-qa-2", "USER: Image: <image> Question: {question} Assistant:"),
    ("llava-qa-3", "USER: Answer question {question} through the image <image> Assistant:"),
    ("vqa", "USER: Image: <image> Question: {question} Short answer: Assistant:"),
    ("vqa-option", "USER: Image: <image> Question: {question} Answer the option\u{2019}s letter. Assistant:"),
    ("instruction", "USER: <Img><image></Img> {instruction} Assistant:"),
    ("dialogue", "USER: {history} Assistant:"),
    ("dialogue-photo", "USER: {history} <Img>{photo}</Img> {history_after} Assistant:"),
];

pub const CAPTION_QUERIES: [&str; 10] = [
    "Describe the image concisely.",
    "Provide a brief description of the given image.",
    "Can you describe this image briefly?",
    "Provide a summary of visual elements depicted in the image.",
    "Give me the essential characteristics of the photograph in a concise manner.",
    "Rephrase the image depicted in a concise manner.",
    "Describe the objects in this image no in detail.",
    "Please introduce the image for me briefly.",
    "Give me the image's short descriptions.",
    "Please provide a general depiction of the image presented.",
];

pub const LLAVA_QA_IDS: [&str; 3] = ["llava-qa-1", "llava-qa-2", "llava-qa-3"];

pub fn template(id: &str) -> Result<&'static str> {
    TEMPLATES.iter().find(|(k, _)| *k == id).map(|(_, t)| *t).ok_or_else(|| Error::UnknownTask(id.to_string()))
}

/// Fills every `{name}` placeholder of template `id` from `fields`.
pub fn render_template(id: &str, fields: &BTreeMap<&str, &str>, variant: LlmVariant) -> Result<String> {
    let tmpl = template(id)?;
    let mut out = String::with_capacity(tmpl.len() + 64);
    let mut rest = tmpl;
    while let Some(open) = rest.find('{') {
        let close = rest[open..].find('}').expect("templates are well formed") + open;
        let name = &rest[open + 1..close];
        let value = fields.get(name).ok_or_else(|| Error::MissingField(name.to_string()))?;
        out.push_str(&rest[..open]);
        out.push_str(value);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    if variant == LlmVariant::EncoderDecoder {
        if let Some(tail) = out.strip_prefix("USER:") {
            out = format!("Human:{tail}");
        }
    }
    Ok(out)
}

pub fn render_caption(query: usize, variant: LlmVariant) -> Result<String> {
    let q = CAPTION_QUERIES.get(query).ok_or(Error::OutOfRange { index: query, size: CAPTION_QUERIES.len() })?;
    render_template("caption", &BTreeMap::from([("query", *q)]), variant)
}

pub fn render_question(id: &str, question: &str, variant: LlmVariant) -> Result<String> {
    render_template(id, &BTreeMap::from([("question", question)]), variant)
}

/// `"A: hello B: hi there"` for turns `[("A", "hello"), ("B", "hi there")]`.
pub fn render_history(turns: &[(String, String)]) -> String {
    turns.iter().map(|(who, text)| format!("{who}: {text}")).collect::<Vec<_>>().join(" ")
}

/// Template text for vocabulary construction.
pub fn template_texts() -> Vec<String> {
    let mut out: Vec<String> = TEMPLATES.iter().map(|(_, t)| t.to_string()).collect();
    out.push("Human:".into());
    out.extend(CAPTION_QUERIES.iter().map(|q| q.to_string()));
    out.iter_mut().for_each(|t| {
        for ph in ["{query}", "{question}", "{instruction}", "{history}", "{photo}", "{history_after}"] {
            *t = t.replace(ph, " ");
        }
    });
    out
}
