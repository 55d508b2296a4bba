//! Yes/no visual question answering over each extracted triplet.

use serde::Serialize;

use crate::backends::{BackendError, EncodedImage, ModelClient, YesNo};
use crate::error::{Error, Result};
use crate::graph::{Triplet, ValidationState};

pub fn render_validation_question(subject: &str, predicate: &str, object: &str) -> Result<String> {
    let parts = [subject, predicate, object].map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "));
    if parts.iter().any(String::is_empty) {
        return Err(Error::Invalid("validation question parts must be nonempty".into()));
    }
    let [s, p, o] = parts;
    Ok(format!("Is the {s} {p} the {o}?"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    AnsweredNo,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationRecord {
    pub caption_id: String,
    pub subject: usize,
    pub predicate: String,
    pub object: usize,
    pub question: String,
    pub raw_answer: String,
    pub decision: ValidationState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<DiscardReason>,
}

/// Asks the VQA backend about one pending triplet and settles it.
///
/// Triplets that are already kept or discarded come back unchanged with no
/// backend call. Ambiguous answers discard.
pub async fn validate_triplet(
    t: &Triplet,
    subject_label: &str,
    object_label: &str,
    image: &EncodedImage,
    client: &ModelClient,
) -> std::result::Result<(Triplet, Option<ValidationRecord>), BackendError> {
    if t.validated != ValidationState::Pending {
        return Ok((t.clone(), None));
    }
    let question = render_validation_question(subject_label, &t.predicate, object_label).map_err(|e| {
        BackendError::BadRequest {
            kind: crate::backends::ServiceKind::Vqa,
            message: e.to_string(),
        }
    })?;
    let (decision, raw_answer, reason) = match client.vqa(image, &question).await {
        Ok(a) if a.answer == YesNo::Yes => (ValidationState::Kept, a.raw_text, None),
        Ok(a) => (ValidationState::Discarded, a.raw_text, Some(DiscardReason::AnsweredNo)),
        Err(BackendError::AmbiguousAnswer { raw }) => {
            (ValidationState::Discarded, raw, Some(DiscardReason::Ambiguous))
        }
        Err(e) => return Err(e),
    };
    let mut settled = t.clone();
    settled.validated = decision;
    let record = ValidationRecord {
        caption_id: t.source_caption_id.clone(),
        subject: t.subject,
        predicate: t.predicate.clone(),
        object: t.object,
        question,
        raw_answer,
        decision,
        reason,
    };
    Ok((settled, Some(record)))
}

/// Marks every pending triplet kept, for runs with validation switched off.
pub fn accept_all(triplets: &[Triplet]) -> Vec<Triplet> {
    triplets
        .iter()
        .map(|t| {
            let mut t = t.clone();
            if t.validated == ValidationState::Pending {
                t.validated = ValidationState::Kept;
            }
            t
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn questions() {
        assert_eq!(render_validation_question("man", "talking to", "man").unwrap(), "Is the man talking to the man?");
        assert_eq!(render_validation_question("dog", "chasing", "frisbee").unwrap(), "Is the dog chasing the frisbee?");
        assert_eq!(render_validation_question("dog", " sitting   on ", "sofa").unwrap(), "Is the dog sitting on the sofa?");
        assert!(render_validation_question("dog", "", "frisbee").is_err());
    }

    #[test]
    fn accept_all_only_touches_pending() {
        let mut done = Triplet::pending(0, "on", 1, "c");
        done.validated = ValidationState::Discarded;
        let out = accept_all(&[Triplet::pending(0, "on", 1, "c"), done]);
        assert_eq!(out[0].validated, ValidationState::Kept);
        assert_eq!(out[1].validated, ValidationState::Discarded);
    }
}
