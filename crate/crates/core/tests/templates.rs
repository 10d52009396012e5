use mmgen::llm::template::{render_caption, render_history, render_question, render_template};
use mmgen::llm::{parse_img_spans, DialogueSample, LlmVariant};
use proptest::prelude::*;
use std::collections::BTreeMap;

const FIXTURE: &str = include_str!("fixtures/instruction_templates.tsv");

fn humanize(s: &str) -> String {
    format!("Human:{}", s.strip_prefix("USER:").expect("fixture rows start with USER:"))
}

fn render(task: &str, arg: &str, variant: LlmVariant) -> String {
    match task {
        "caption-query" => render_caption(arg.parse().unwrap(), variant).unwrap(),
        "dialogue" => {
            let turns: Vec<(String, String)> = arg
                .split('|')
                .map(|t| {
                    let (who, text) = t.split_once(": ").unwrap();
                    (who.to_string(), text.to_string())
                })
                .collect();
            DialogueSample { turns, target: String::new() }.prompt(variant).unwrap()
        }
        id => render_question(id, arg, variant).unwrap(),
    }
}

#[test]
fn renderings_match_frozen_transcriptions_byte_for_byte() {
    let mut rows = 0;
    for line in FIXTURE.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let [task, arg, want] = cols[..] else { panic!("bad fixture row {line:?}") };
        assert_eq!(render(task, arg, LlmVariant::DecoderOnly).as_bytes(), want.as_bytes(), "{task} {arg}");
        assert_eq!(render(task, arg, LlmVariant::EncoderDecoder).as_bytes(), humanize(want).as_bytes(), "{task} {arg}");
        rows += 1;
    }
    assert_eq!(rows, 16);
}

#[test]
fn only_the_leading_speaker_tag_is_substituted() {
    let out = render_template("vqa", &BTreeMap::from([("question", "is USER: here?")]), LlmVariant::EncoderDecoder).unwrap();
    assert_eq!(out, "Human: Image: <image> Question: is USER: here? Short answer: Assistant:");
}

#[test]
fn photo_dialogue_template_carries_the_caption() {
    let f = BTreeMap::from([("history", "A: hi"), ("photo", "a big red square at center"), ("history_after", "A: nice")]);
    let s = render_template("dialogue-photo", &f, LlmVariant::DecoderOnly).unwrap();
    assert_eq!(s, "USER: A: hi <Img>a big red square at center</Img> A: nice Assistant:");
    assert_eq!(parse_img_spans(&s).unwrap().1, vec!["a big red square at center".to_string()]);
}

fn caption_text() -> impl Strategy<Value = String> {
    "[ -~\u{e0}-\u{ff}]{1,40}".prop_filter("no markers", |s| !s.contains("<Img>") && !s.contains("</Img>"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn span_parsing_inverts_response_rendering(lead in "[a-z !?.]{0,20}", caption in caption_text(), tail in "[a-z .]{0,12}") {
        let lead = lead.replace('<', "");
        let response = format!("{lead}<Img>{caption}</Img>{tail}");
        let (visible, caps) = parse_img_spans(&response).unwrap();
        prop_assert_eq!(caps, vec![caption.clone()]);
        prop_assert_eq!(visible, format!("{lead}{tail}"));
        let d = DialogueSample { turns: vec![("A".into(), "hello".into())], target: response };
        prop_assert_eq!(d.captions().unwrap(), vec![caption]);
        prop_assert_eq!(render_history(&d.turns), "A: hello");
    }
}
