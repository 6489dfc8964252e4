//! Parsers for the text the model roles return over the wire.

use serde_json::{Map, Value};
use thiserror::Error;

use super::{AnswerDistribution, Decision, PolicySample};
use crate::geometry::{ActionEntry, ActionKind, ActionPlan, PlanError, PlanLimits};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyParseError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("expected a JSON object at {0}")]
    NotAnObject(String),
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("field `{field}` has the wrong type, expected {expected}")]
    WrongType { field: String, expected: &'static str },
    #[error("decision must be \"skip\" or \"call_wm\", got {0:?}")]
    InvalidDecision(String),
    #[error("actions[{index}]: unknown action type {value:?}")]
    UnknownActionType { index: usize, value: String },
    #[error("actions[{index}]: value must be a positive integer, got {value}")]
    InvalidValue { index: usize, value: String },
    #[error("skip decision carries {0} actions")]
    SkipWithActions(usize),
    #[error("invalid plan: {0}")]
    InvalidPlan(#[from] PlanError),
}

const POLICY_FIELDS: [&str; 3] = ["decision", "reason", "actions"];
const ACTION_FIELDS: [&str; 2] = ["type", "value"];

/// Strict parse of the policy output schema.
pub fn parse_policy_output(text: &str) -> Result<PolicySample, PolicyParseError> {
    parse_policy_output_with(text, true, &PlanLimits::default())
}

/// `strict` rejects fields outside the schema; otherwise they are ignored.
pub fn parse_policy_output_with(text: &str, strict: bool, limits: &PlanLimits) -> Result<PolicySample, PolicyParseError> {
    let value: Value = serde_json::from_str(text.trim()).map_err(|e| PolicyParseError::MalformedJson(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| PolicyParseError::NotAnObject("top level".into()))?;
    check_fields(obj, &POLICY_FIELDS, strict, "")?;

    let decision = match required(obj, "decision", "")? {
        Value::String(s) if s == "skip" => Decision::Skip,
        Value::String(s) if s == "call_wm" => Decision::CallWm,
        Value::String(s) => return Err(PolicyParseError::InvalidDecision(s.clone())),
        _ => return Err(wrong_type("decision", "string")),
    };
    let reason = required(obj, "reason", "")?
        .as_str()
        .ok_or_else(|| wrong_type("reason", "string"))?
        .to_string();
    let raw_actions = required(obj, "actions", "")?
        .as_array()
        .ok_or_else(|| wrong_type("actions", "array"))?;

    let mut entries = Vec::with_capacity(raw_actions.len());
    for (index, raw) in raw_actions.iter().enumerate() {
        let prefix = format!("actions[{index}].");
        let a = raw
            .as_object()
            .ok_or_else(|| PolicyParseError::NotAnObject(format!("actions[{index}]")))?;
        check_fields(a, &ACTION_FIELDS, strict, &prefix)?;
        let kind = match required(a, "type", &prefix)? {
            Value::String(s) => ActionKind::ALL
                .into_iter()
                .find(|k| k.as_str() == s)
                .ok_or_else(|| PolicyParseError::UnknownActionType {
                    index,
                    value: s.clone(),
                })?,
            _ => return Err(wrong_type(&format!("{prefix}type"), "string")),
        };
        let v = required(a, "value", &prefix)?;
        let value = v
            .as_u64()
            .or_else(|| v.as_f64().filter(|f| f.fract() == 0.0 && *f >= 0.0).map(|f| f as u64))
            .filter(|&n| n >= 1 && n <= u32::MAX as u64)
            .ok_or_else(|| PolicyParseError::InvalidValue { index, value: v.to_string() })?;
        entries.push(ActionEntry::new(kind, value as u32));
    }

    if decision == Decision::Skip && !entries.is_empty() {
        return Err(PolicyParseError::SkipWithActions(entries.len()));
    }
    let plan = ActionPlan::new(entries);
    plan.validate(limits)?;
    Ok(PolicySample {
        decision,
        reason,
        plan,
        fallback: false,
    })
}

fn check_fields(obj: &Map<String, Value>, allowed: &[&str], strict: bool, prefix: &str) -> Result<(), PolicyParseError> {
    if strict {
        if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(PolicyParseError::UnknownField(format!("{prefix}{k}")));
        }
    }
    Ok(())
}

fn required<'a>(obj: &'a Map<String, Value>, field: &str, prefix: &str) -> Result<&'a Value, PolicyParseError> {
    obj.get(field)
        .ok_or_else(|| PolicyParseError::MissingField(format!("{prefix}{field}")))
}

fn wrong_type(field: &str, expected: &'static str) -> PolicyParseError {
    PolicyParseError::WrongType {
        field: field.to_string(),
        expected,
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifierParseError {
    #[error("empty verifier output")]
    Empty,
    #[error("verifier output is not an integer: {0:?}")]
    NotAnInteger(String),
    #[error("verifier score {0} outside 0..=9")]
    OutOfRange(String),
    #[error("extra text after verifier score: {0:?}")]
    ExtraText(String),
}

/// A bare integer in `0..=9`, surrounding whitespace allowed.
pub fn parse_verifier_output(text: &str) -> Result<u8, VerifierParseError> {
    let t = text.trim();
    if t.is_empty() {
        return Err(VerifierParseError::Empty);
    }
    let digits = t.strip_prefix(['-', '+']).unwrap_or(t);
    let len = digits.chars().take_while(char::is_ascii_digit).count();
    if len == 0 {
        return Err(VerifierParseError::NotAnInteger(t.to_string()));
    }
    if len < digits.len() {
        return Err(VerifierParseError::ExtraText(t.to_string()));
    }
    if t.starts_with('-') && digits.bytes().any(|b| b != b'0') {
        return Err(VerifierParseError::OutOfRange(t.to_string()));
    }
    match digits.parse::<u64>() {
        Ok(n) if n <= 9 => Ok(n as u8),
        _ => Err(VerifierParseError::OutOfRange(t.to_string())),
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnswerParseError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("expected {expected} scores, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("scores must be finite, non-negative and not all zero")]
    InvalidScores,
}

/// `{"scores": [...]}` with one non-negative score per choice.
pub fn parse_answer_output(text: &str, k: usize) -> Result<AnswerDistribution, AnswerParseError> {
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Wire {
        scores: Vec<f64>,
    }
    let wire: Wire = serde_json::from_str(text.trim()).map_err(|e| AnswerParseError::MalformedJson(e.to_string()))?;
    if wire.scores.len() != k {
        return Err(AnswerParseError::WrongLength {
            expected: k,
            got: wire.scores.len(),
        });
    }
    AnswerDistribution::from_scores(&wire.scores).ok_or(AnswerParseError::InvalidScores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn skip_example() {
        let s = parse_policy_output(r#"{"decision":"skip","reason":"visible","actions":[]}"#).unwrap();
        assert_eq!(s.decision, Decision::Skip);
        assert!(s.plan.is_empty());
        assert_eq!(s.reason, "visible");
    }

    #[test]
    fn call_example() {
        let s = parse_policy_output(r#"{"decision":"call_wm","reason":"turn","actions":[{"type":"turn-left","value":10}]}"#).unwrap();
        assert_eq!(s.decision, Decision::CallWm);
        assert_eq!(s.plan.entries, vec![ActionEntry::new(ActionKind::TurnLeft, 10)]);
    }

    #[test]
    fn distinct_error_kinds() {
        let cases: Vec<(&str, fn(&PolicyParseError) -> bool)> = vec![
            (r#"{"decision":"skip""#, |e| matches!(e, PolicyParseError::MalformedJson(_))),
            (r#"{"decision":"maybe","reason":"","actions":[]}"#, |e| matches!(e, PolicyParseError::InvalidDecision(_))),
            (r#"{"decision":"skip","reason":"","actions":[],"confidence":1}"#, |e| matches!(e, PolicyParseError::UnknownField(_))),
            (r#"{"decision":"call_wm","reason":"","actions":[{"type":"jump","value":1}]}"#, |e| {
                matches!(e, PolicyParseError::UnknownActionType { .. })
            }),
            (r#"{"decision":"skip","reason":"","actions":[{"type":"turn-left","value":1}]}"#, |e| {
                matches!(e, PolicyParseError::SkipWithActions(1))
            }),
            (r#"{"decision":"call_wm","reason":"","actions":[{"type":"turn-left","value":0}]}"#, |e| {
                matches!(e, PolicyParseError::InvalidValue { .. })
            }),
            (r#"{"decision":"call_wm","reason":"","actions":[{"type":"turn-left","value":2.5}]}"#, |e| {
                matches!(e, PolicyParseError::InvalidValue { .. })
            }),
            (
                r#"{"decision":"call_wm","reason":"","actions":[{"type":"turn-left","value":2},{"type":"turn-right","value":2}]}"#,
                |e| matches!(e, PolicyParseError::InvalidPlan(PlanError::OpposingTurns { index: 0 })),
            ),
            (r#"{"decision":"skip","actions":[]}"#, |e| matches!(e, PolicyParseError::MissingField(_))),
            (r#"[1,2]"#, |e| matches!(e, PolicyParseError::NotAnObject(_))),
            (r#"{"decision":"skip","reason":3,"actions":[]}"#, |e| matches!(e, PolicyParseError::WrongType { .. })),
        ];
        for (text, ok) in cases {
            let err = parse_policy_output(text).unwrap_err();
            assert!(ok(&err), "{text} gave {err:?}");
        }
    }

    #[test]
    fn lenient_ignores_unknown_fields() {
        let text = r#"{"decision":"skip","reason":"","actions":[],"confidence":1}"#;
        assert!(parse_policy_output_with(text, false, &PlanLimits::default()).is_ok());
    }

    #[test]
    fn verifier_examples() {
        assert_eq!(parse_verifier_output("5"), Ok(5));
        assert_eq!(parse_verifier_output(" 9\n"), Ok(9));
        assert_eq!(parse_verifier_output("0"), Ok(0));
        assert!(matches!(parse_verifier_output("score: 5"), Err(VerifierParseError::NotAnInteger(_))));
        assert!(matches!(parse_verifier_output("5 points"), Err(VerifierParseError::ExtraText(_))));
        assert!(matches!(parse_verifier_output("10"), Err(VerifierParseError::OutOfRange(_))));
        assert!(matches!(parse_verifier_output("-1"), Err(VerifierParseError::OutOfRange(_))));
        assert!(matches!(parse_verifier_output("4.5"), Err(VerifierParseError::ExtraText(_))));
        assert_eq!(parse_verifier_output(""), Err(VerifierParseError::Empty));
    }

    #[test]
    fn answer_scores() {
        let d = parse_answer_output(r#"{"scores":[1,1,2,0]}"#, 4).unwrap();
        assert_eq!(d.argmax(), 2);
        assert!(matches!(parse_answer_output(r#"{"scores":[1]}"#, 4), Err(AnswerParseError::WrongLength { .. })));
        assert!(matches!(parse_answer_output(r#"{"scores":[0,0]}"#, 2), Err(AnswerParseError::InvalidScores)));
        assert!(matches!(parse_answer_output("nope", 2), Err(AnswerParseError::MalformedJson(_))));
    }

    fn arb_sample() -> impl Strategy<Value = PolicySample> {
        let entry = (0usize..3, 1u32..=20).prop_map(|(k, v)| ActionEntry::new(ActionKind::ALL[k], v));
        prop_oneof![
            "[a-z ]{0,20}".prop_map(PolicySample::skip),
            (prop::collection::vec(entry, 1..=6), "[a-z ]{0,20}").prop_filter_map("valid plan", |(entries, reason)| {
                let plan = ActionPlan::new(entries);
                plan.validate(&PlanLimits::default()).ok()?;
                Some(PolicySample::call(plan, reason))
            }),
        ]
    }

    proptest! {
        #[test]
        fn canonical_form_roundtrips(s in arb_sample()) {
            let wire = s.to_wire();
            let back = parse_policy_output(&wire).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(back.to_wire(), wire);
        }

        #[test]
        fn verifier_accepts_exactly_digits(n in 0u8..=9, pre in "[ \t\n]{0,3}", post in "[ \t\n]{0,3}") {
            prop_assert_eq!(parse_verifier_output(&format!("{pre}{n}{post}")), Ok(n));
        }
    }
}
