//! Extraction of `<Img>…</Img>` caption spans from generated responses.

use crate::error::{Error, Result};
use crate::text::{IMG_CLOSE, IMG_OPEN};

/// Splits `text` into the visible response (spans removed, markers included)
/// and the list of span contents. Nested, stray or unclosed markers are errors
/// reporting the byte offset of the offending marker.
pub fn parse_img_spans(text: &str) -> Result<(String, Vec<String>)> {
    let mut visible = String::new();
    let mut captions = Vec::new();
    let mut open: Option<usize> = None;
    let mut i = 0;
    let mut plain_from = 0;
    while i < text.len() {
        let rest = &text[i..];
        if rest.starts_with(IMG_OPEN) {
            if open.is_some() {
                return Err(Error::SpanParse { position: i, reason: "nested <Img>".into() });
            }
            visible.push_str(&text[plain_from..i]);
            i += IMG_OPEN.len();
            open = Some(i);
        } else if rest.starts_with(IMG_CLOSE) {
            let Some(start) = open.take() else {
                return Err(Error::SpanParse { position: i, reason: "</Img> without <Img>".into() });
            };
            captions.push(text[start..i].to_string());
            i += IMG_CLOSE.len();
            plain_from = i;
        } else {
            i += rest.chars().next().map_or(1, char::len_utf8);
        }
    }
    if let Some(start) = open {
        return Err(Error::SpanParse { position: start - IMG_OPEN.len(), reason: "unclosed <Img>".into() });
    }
    visible.push_str(&text[plain_from..]);
    Ok((visible, captions))
}
