//! Turn wire format.
//!
//! A turn serializes as its think text, a newline, then exactly one action:
//! `<tool_call>{"name":...,"arguments":{...}}</tool_call>` or `\boxed{answer}`.

use std::fmt;

use super::{ToolCall, Turn, BOXED_OPEN, TOOL_CALL_CLOSE, TOOL_CALL_OPEN};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnbalancedTag,
    InvalidArguments(String),
    MultipleAnswers,
    MultipleToolCalls,
    BothActions,
    MissingAction,
    TrailingText,
}

/// Parse failure at the first offending byte offset.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match &self.kind {
            ParseErrorKind::UnbalancedTag => "unbalanced tag".to_string(),
            ParseErrorKind::InvalidArguments(m) => format!("invalid tool-call arguments: {m}"),
            ParseErrorKind::MultipleAnswers => "more than one boxed answer".to_string(),
            ParseErrorKind::MultipleToolCalls => "more than one tool call".to_string(),
            ParseErrorKind::BothActions => "tool call and boxed answer in one turn".to_string(),
            ParseErrorKind::MissingAction => "no tool call or boxed answer".to_string(),
            ParseErrorKind::TrailingText => "text after the action".to_string(),
        };
        write!(f, "offset {}: {what}", self.offset)
    }
}

fn err(offset: usize, kind: ParseErrorKind) -> ParseError {
    ParseError { offset, kind }
}

pub fn serialize_turn(turn: &Turn) -> String {
    let mut out = String::with_capacity(turn.think.len() + 64);
    out.push_str(&turn.think);
    out.push('\n');
    if let Some(call) = &turn.tool_call {
        out.push_str(TOOL_CALL_OPEN);
        out.push_str(&serde_json::to_string(call).expect("tool call serializes"));
        out.push_str(TOOL_CALL_CLOSE);
    } else if let Some(answer) = &turn.final_answer {
        out.push_str(BOXED_OPEN);
        out.push_str(answer);
        out.push('}');
    }
    out
}

fn think_before(text: &str, action_start: usize) -> String {
    let think = &text[..action_start];
    think.strip_suffix('\n').unwrap_or(think).to_string()
}

fn check_trailing(text: &str, from: usize) -> Result<(), ParseError> {
    let rest = &text[from..];
    if let Some(pos) = rest.find(TOOL_CALL_OPEN) {
        return Err(err(from + pos, ParseErrorKind::MultipleToolCalls));
    }
    if let Some(pos) = rest.find(BOXED_OPEN) {
        return Err(err(from + pos, ParseErrorKind::MultipleAnswers));
    }
    if let Some(pos) = rest.find(TOOL_CALL_CLOSE) {
        return Err(err(from + pos, ParseErrorKind::UnbalancedTag));
    }
    match rest.char_indices().find(|(_, c)| !c.is_whitespace()) {
        Some((pos, _)) => Err(err(from + pos, ParseErrorKind::TrailingText)),
        None => Ok(()),
    }
}

pub fn parse_turn(text: &str) -> Result<Turn, ParseError> {
    let open = text.find(TOOL_CALL_OPEN);
    let boxed = text.find(BOXED_OPEN);
    let close = text.find(TOOL_CALL_CLOSE);

    match (open, boxed) {
        (None, None) => match close {
            Some(c) => Err(err(c, ParseErrorKind::UnbalancedTag)),
            None => Err(err(text.len(), ParseErrorKind::MissingAction)),
        },
        (Some(o), Some(b)) => Err(err(o.max(b), ParseErrorKind::BothActions)),
        (Some(o), None) => {
            if let Some(c) = close.filter(|&c| c < o) {
                return Err(err(c, ParseErrorKind::UnbalancedTag));
            }
            let body_start = o + TOOL_CALL_OPEN.len();
            let body_end = text[body_start..]
                .find(TOOL_CALL_CLOSE)
                .map(|p| body_start + p)
                .ok_or_else(|| err(o, ParseErrorKind::UnbalancedTag))?;
            let body = &text[body_start..body_end];
            if let Some(nested) = body.find(TOOL_CALL_OPEN) {
                return Err(err(body_start + nested, ParseErrorKind::UnbalancedTag));
            }
            let call: ToolCall = serde_json::from_str(body)
                .map_err(|e| err(body_start, ParseErrorKind::InvalidArguments(e.to_string())))?;
            call.check()
                .map_err(|m| err(body_start, ParseErrorKind::InvalidArguments(m)))?;
            check_trailing(text, body_end + TOOL_CALL_CLOSE.len())?;
            Ok(Turn {
                think: think_before(text, o),
                tool_call: Some(call),
                final_answer: None,
            })
        }
        (None, Some(b)) => {
            if let Some(c) = close {
                return Err(err(c, ParseErrorKind::UnbalancedTag));
            }
            let start = b + BOXED_OPEN.len();
            let mut depth = 1usize;
            let mut end = None;
            for (i, c) in text[start..].char_indices() {
                match c {
                    '{' => depth += 1,
                    '}' => {
                        depth -= 1;
                        if depth == 0 {
                            end = Some(start + i);
                            break;
                        }
                    }
                    _ => {}
                }
            }
            let end = end.ok_or_else(|| err(b, ParseErrorKind::UnbalancedTag))?;
            let answer = &text[start..end];
            if let Some(nested) = answer.find(BOXED_OPEN) {
                return Err(err(start + nested, ParseErrorKind::MultipleAnswers));
            }
            check_trailing(text, end + 1)?;
            Ok(Turn {
                think: think_before(text, b),
                tool_call: None,
                final_answer: Some(answer.to_string()),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::BoundingBox;

    #[test]
    fn parses_clip_call() {
        let t =
            parse_turn(r#"<tool_call>{"name":"clip","arguments":{"frames":[0,2]}}</tool_call>"#)
                .unwrap();
        assert_eq!(t.tool_call, Some(ToolCall::Clip { frames: vec![0, 2] }));
        assert_eq!(t.think, "");
    }

    #[test]
    fn parses_boxed_answer() {
        let t = parse_turn("So the price is\n\\boxed{42}").unwrap();
        assert_eq!(t.final_answer.as_deref(), Some("42"));
        assert_eq!(t.think, "So the price is");
        let nested = parse_turn("\\boxed{a {b} c}").unwrap();
        assert_eq!(nested.final_answer.as_deref(), Some("a {b} c"));
    }

    #[test]
    fn crop_round_trips() {
        let turn = Turn::call(
            "Zoom in.\nSecond line",
            ToolCall::Crop {
                frame: 3,
                bbox: BoundingBox::new(1, 2, 30, 40).unwrap(),
            },
        );
        assert_eq!(parse_turn(&serialize_turn(&turn)).unwrap(), turn);
        let trailing_newline = Turn::answer("done\n", "x");
        assert_eq!(
            parse_turn(&serialize_turn(&trailing_newline)).unwrap(),
            trailing_newline
        );
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        let e = parse_turn("think <tool_call>{\"name\":\"clip\"").unwrap_err();
        assert_eq!(e, err(6, ParseErrorKind::UnbalancedTag));

        let e =
            parse_turn("<tool_call>{\"name\":\"zoom\",\"arguments\":{}}</tool_call>").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::InvalidArguments(_)));
        assert_eq!(e.offset, TOOL_CALL_OPEN.len());

        let e = parse_turn("\\boxed{a} and \\boxed{b}").unwrap_err();
        assert_eq!(e, err(14, ParseErrorKind::MultipleAnswers));

        let e = parse_turn("just thinking").unwrap_err();
        assert_eq!(e, err(13, ParseErrorKind::MissingAction));

        let e = parse_turn("x</tool_call>").unwrap_err();
        assert_eq!(e, err(1, ParseErrorKind::UnbalancedTag));

        let e = parse_turn("\\boxed{1} <tool_call>{}</tool_call>").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::BothActions);

        let e = parse_turn("\\boxed{1} trailing").unwrap_err();
        assert_eq!(e, err(10, ParseErrorKind::TrailingText));

        let e = parse_turn("\\boxed{unclosed").unwrap_err();
        assert_eq!(e, err(0, ParseErrorKind::UnbalancedTag));

        let e = parse_turn(r#"<tool_call>{"name":"clip","arguments":{"frames":[]}}</tool_call>"#)
            .unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::InvalidArguments(_)));

        let e = parse_turn(
            r#"<tool_call>{"name":"crop","arguments":{"frame":0,"box":[5,0,5,3]}}</tool_call>"#,
        )
        .unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::InvalidArguments(_)));
    }
}
