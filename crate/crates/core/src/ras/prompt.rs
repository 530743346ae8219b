//! Prompt text for the image generator, and its inverse.

use crate::graph::{TripletLabel, Vocabularies};

pub const PROMPT_PREFIX: &str = "Realistic Image of ";
const JOIN: &str = " and ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub labels: Vec<TripletLabel>,
}

/// `"Realistic Image of " + phrases joined by " and "`, in label order.
pub fn compose_prompt(labels: &[TripletLabel], vocab: &Vocabularies) -> Prompt {
    let phrases: Vec<String> = labels.iter().map(|l| vocab.phrase(l)).collect();
    Prompt { text: format!("{PROMPT_PREFIX}{}", phrases.join(JOIN)), labels: labels.to_vec() }
}

/// Recovers the label sequence of a composed prompt. Class names may
/// contain spaces or the word "and", so the parser tries every vocabulary
/// name at each position and backtracks. Returns the first parse in
/// vocabulary order, or `None` when the text is not a composed prompt.
pub fn parse_prompt(text: &str, vocab: &Vocabularies) -> Option<Vec<TripletLabel>> {
    let body = text.strip_prefix(PROMPT_PREFIX)?;
    let mut out = Vec::new();
    parse_phrases(body, vocab, &mut out).then_some(out)
}

fn names_at<'a>(rest: &'a str, names: &'a [String]) -> impl Iterator<Item = (u32, &'a str)> + 'a {
    names.iter().enumerate().filter_map(move |(i, n)| rest.strip_prefix(n.as_str()).map(|r| (i as u32, r)))
}

fn parse_phrases(rest: &str, vocab: &Vocabularies, out: &mut Vec<TripletLabel>) -> bool {
    for (s, r) in names_at(rest, vocab.objects.names()) {
        let Some(r) = r.strip_prefix(' ') else { continue };
        for (p, r) in names_at(r, vocab.predicates.names()) {
            let Some(r) = r.strip_prefix(' ') else { continue };
            for (o, r) in names_at(r, vocab.objects.names()) {
                out.push(TripletLabel::new(s, p, o));
                if r.is_empty() {
                    return true;
                }
                if let Some(r) = r.strip_prefix(JOIN) {
                    if parse_phrases(r, vocab, out) {
                        return true;
                    }
                }
                out.pop();
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Vocabulary;
    use proptest::prelude::*;

    fn vocab() -> Vocabularies {
        Vocabularies {
            objects: Vocabulary::new(["man", "horse", "house", "cat", "mat", "bread and butter", "bread"]).unwrap(),
            predicates: Vocabulary::new(["on", "behind", "in front of", "and", "in"]).unwrap(),
        }
    }

    #[test]
    fn example_prompt() {
        let v = vocab();
        let labels = [
            v.triplet("man", "on", "horse").unwrap(),
            v.triplet("house", "behind", "horse").unwrap(),
            v.triplet("man", "in front of", "house").unwrap(),
        ];
        let p = compose_prompt(&labels, &v);
        assert_eq!(p.text, "Realistic Image of man on horse and house behind horse and man in front of house");
        assert_eq!(parse_prompt(&p.text, &v).unwrap(), labels);
        let single = compose_prompt(&[v.triplet("cat", "on", "mat").unwrap()], &v);
        assert_eq!(single.text, "Realistic Image of cat on mat");
        let mut rev = labels;
        rev.reverse();
        assert_eq!(
            compose_prompt(&rev, &v).text,
            "Realistic Image of man in front of house and house behind horse and man on horse"
        );
    }

    #[test]
    fn ambiguous_names_backtrack() {
        let v = vocab();
        let labels = [v.triplet("bread", "and", "bread and butter").unwrap(), v.triplet("man", "in", "house").unwrap()];
        let p = compose_prompt(&labels, &v);
        assert_eq!(parse_prompt(&p.text, &v).unwrap(), labels);
        assert_eq!(parse_prompt("Realistic Image of man on", &v), None);
        assert_eq!(parse_prompt("Image of man on horse", &v), None);
    }

    proptest! {
        #[test]
        fn prompts_roundtrip(ids in prop::collection::vec((0u32..7, 0u32..5, 0u32..7), 1..6)) {
            let v = vocab();
            let labels: Vec<TripletLabel> = ids.iter().map(|&(s, p, o)| TripletLabel::new(s, p, o)).collect();
            let p = compose_prompt(&labels, &v);
            let parsed = parse_prompt(&p.text, &v).unwrap();
            // an ambiguous vocabulary may admit another parse; it must
            // render to the same text
            prop_assert_eq!(compose_prompt(&parsed, &v).text, p.text);
        }

        #[test]
        fn unambiguous_vocab_recovers_labels(ids in prop::collection::vec((0u32..5, 0u32..3, 0u32..5), 1..6)) {
            let v = Vocabularies {
                objects: Vocabulary::new(["man", "horse", "house", "tennis racket", "man in suit"]).unwrap(),
                predicates: Vocabulary::new(["on", "in front of", "in"]).unwrap(),
            };
            let labels: Vec<TripletLabel> = ids.iter().map(|&(s, p, o)| TripletLabel::new(s, p, o)).collect();
            prop_assert_eq!(parse_prompt(&compose_prompt(&labels, &v).text, &v).unwrap(), labels);
        }
    }
}
