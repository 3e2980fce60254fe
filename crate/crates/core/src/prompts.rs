//! Bundled prompt templates.
//!
//! The question-conversion templates are shipped exactly as published; the
//! other prompts are replaceable assets. Placeholders use `{name}` except in
//! the question templates, which keep their original `[NAME]`-style markers.

use crate::corpus::Dataset;

pub const QUESTION_BIOGRAPHY: &str = include_str!("../assets/question_biography.txt");
pub const QUESTION_MEDICAL: &str = include_str!("../assets/question_medical.txt");
pub const EXTRACT_ATOMIC: &str = include_str!("../assets/extract_atomic.txt");
pub const ANSWER_FEWSHOT: &str = include_str!("../assets/answer_fewshot.txt");
pub const EQUIVALENCE_JUDGE: &str = include_str!("../assets/equivalence_judge.txt");
pub const SUPPORT_JUDGE: &str = include_str!("../assets/support_judge.txt");
pub const RELEVANCE_JUDGE: &str = include_str!("../assets/relevance_judge.txt");
const FEWSHOT_BIOGRAPHIES: &str = include_str!("../assets/fewshot_biographies.txt");
const FEWSHOT_MEDICAL_QA: &str = include_str!("../assets/fewshot_medical_qa.txt");
const FEWSHOT_CUSTOM: &str = include_str!("../assets/fewshot_custom.txt");

/// Substitutes `{key}` placeholders. Trailing newlines of the template are
/// dropped so that every prompt ends on its final cue.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.trim_end_matches('\n').to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// Question-conversion prompt for one statement.
///
/// Biographies (and custom datasets) use the person template, where
/// `[HIM/HER]` is replaced by `object_pronoun`; medical QA uses the
/// condition template.
pub fn question_prompt(
    dataset: Dataset,
    subject: &str,
    object_pronoun: &str,
    statement: &str,
) -> String {
    let template = question_template(dataset).trim_end_matches('\n');
    match dataset {
        Dataset::MedicalQa => template
            .replace("[CONDITION]", subject)
            .replace("[STATEMENT]", statement),
        Dataset::Biographies | Dataset::Custom => template
            .replace("[NAME]", subject)
            .replace("[HIM/HER]", object_pronoun)
            .replace("[STATEMENT]", statement),
    }
}

pub fn question_template(dataset: Dataset) -> &'static str {
    match dataset {
        Dataset::MedicalQa => QUESTION_MEDICAL,
        Dataset::Biographies | Dataset::Custom => QUESTION_BIOGRAPHY,
    }
}

/// Few-shot wrapper applied to prompts sent to base (non-instruction) models.
pub fn fewshot_wrap(dataset: Dataset, prompt: &str) -> String {
    let template = match dataset {
        Dataset::Biographies => FEWSHOT_BIOGRAPHIES,
        Dataset::MedicalQa => FEWSHOT_MEDICAL_QA,
        Dataset::Custom => FEWSHOT_CUSTOM,
    };
    fill(template, &[("prompt", prompt)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn biography_template_substitution() {
        let p = question_prompt(
            Dataset::Biographies,
            "Yo-Yo Ma",
            "him",
            "Yo-Yo Ma plays the cello.",
        );
        assert!(p.contains("related to Yo-Yo Ma or people around him."));
        assert!(p.ends_with("Statement: Yo-Yo Ma plays the cello.\n\nQuestion:"));
        assert!(!p.contains('['));
        // The worked examples stay untouched.
        assert!(p.contains("Question: In what year was Hillary Clinton born?"));
    }

    #[test]
    fn medical_template_substitution() {
        let p = question_prompt(
            Dataset::MedicalQa,
            "stroke",
            "them",
            "Strokes cause numbness.",
        );
        assert!(p.contains("about the medical condition stroke. Please rephrase"));
        assert!(p.ends_with("Statement: Strokes cause numbness.\n\nQuestion:"));
        assert!(!p.contains("[CONDITION]"));
    }

    #[test]
    fn fill_replaces_all_occurrences() {
        assert_eq!(fill("{a} and {a}\n", &[("a", "x")]), "x and x");
    }
}
