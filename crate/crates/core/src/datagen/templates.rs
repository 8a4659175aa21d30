//! Versioned prompt and instruction templates.
//!
//! Generation prompts live as data files under `templates/<version>/`;
//! instruction and reader-prompt rendering is byte-deterministic and
//! shared between training-data assembly and evaluation, so the reader
//! sees at inference exactly the layout it was trained on.

use super::{CotAnswer, DatagenError};

/// Template versions this build knows how to render.
pub const KNOWN_VERSIONS: &[&str] = &["v1"];

const QUESTION_V1: &str = include_str!("../../templates/v1/question.txt");
const ANSWER_V1: &str = include_str!("../../templates/v1/answer.txt");

/// Errors unless `version` is one of [`KNOWN_VERSIONS`].
pub fn ensure_version(version: &str) -> Result<(), DatagenError> {
    if KNOWN_VERSIONS.contains(&version) {
        Ok(())
    } else {
        Err(DatagenError::UnknownTemplateVersion {
            requested: version.to_string(),
            known: KNOWN_VERSIONS.join(", "),
        })
    }
}

/// Prompt asking the generator model for one question about `context`.
pub fn question_prompt(version: &str, context: &str) -> Result<String, DatagenError> {
    ensure_version(version)?;
    Ok(QUESTION_V1.replace("{context}", context))
}

/// Prompt asking the generator model for a cited chain-of-thought answer.
pub fn answer_prompt(version: &str, context: &str, question: &str) -> Result<String, DatagenError> {
    ensure_version(version)?;
    Ok(ANSWER_V1
        .replace("{context}", context)
        .replace("{question}", question))
}

/// Numbered document blocks followed by the question. This is both the
/// training instruction layout and the reader prompt layout.
pub fn render_reader_prompt(
    version: &str,
    documents: &[(&str, &str)],
    question: &str,
) -> Result<String, DatagenError> {
    ensure_version(version)?;
    let mut out = String::new();
    for (i, (_, text)) in documents.iter().enumerate() {
        out.push_str(&format!("Document {}:\n{}\n\n", i + 1, text));
    }
    out.push_str(&format!("Question: {question}\nAnswer:"));
    Ok(out)
}

/// Training target: the reasoning chain followed by the delimited answer.
pub fn render_training_target(cot: &CotAnswer) -> String {
    format!(
        "{}\n{} {}",
        cot.reasoning.trim(),
        super::ANSWER_DELIMITER,
        cot.final_answer
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompts_substitute_placeholders() {
        let q = question_prompt("v1", "PASSAGE").unwrap();
        assert!(q.contains("PASSAGE"));
        assert!(!q.contains("{context}"));
        let a = answer_prompt("v1", "PASSAGE", "WHO?").unwrap();
        assert!(a.contains("PASSAGE") && a.contains("WHO?"));
        assert!(!a.contains("{question}"));
    }

    #[test]
    fn unknown_version_lists_known_ones() {
        let err = question_prompt("v9", "x").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("v9") && msg.contains("v1"), "{msg}");
    }

    #[test]
    fn reader_prompt_numbers_documents_in_order() {
        let p = render_reader_prompt("v1", &[("a", "alpha"), ("b", "beta")], "Q?").unwrap();
        assert_eq!(
            p,
            "Document 1:\nalpha\n\nDocument 2:\nbeta\n\nQuestion: Q?\nAnswer:"
        );
    }

    #[test]
    fn training_target_recomposes_delimiter() {
        let cot = CotAnswer {
            reasoning: "##begin_quote##x##end_quote## so".into(),
            final_answer: "x".into(),
        };
        assert_eq!(
            render_training_target(&cot),
            "##begin_quote##x##end_quote## so\n<ANSWER>: x"
        );
    }
}
