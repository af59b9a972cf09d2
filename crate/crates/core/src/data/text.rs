/// Token that replaces the commas between keyword groups.
pub const SEP_TOKEN: &str = "[SEP]";

/// Lowercases, turns every non-alphabetic character into a space and splits
/// on whitespace.
pub fn normalize_text(s: &str) -> Vec<String> {
    let cleaned: String = s
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphabetic() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Normalizes each comma-separated keyword group and joins the non-empty
/// groups with [`SEP_TOKEN`].
pub fn keywords_to_sequence(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for group in s.split(',').map(normalize_text).filter(|g| !g.is_empty()) {
        if !out.is_empty() {
            out.push(SEP_TOKEN.to_owned());
        }
        out.extend(group);
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize_text("Age-related Macular Degeneration (AMD)"),
            toks(&["age", "related", "macular", "degeneration", "amd"])
        );
        assert!(normalize_text("").is_empty());
        assert_eq!(
            normalize_text("OCT,  78-year-old!"),
            toks(&["oct", "year", "old"])
        );
    }

    #[test]
    fn keyword_examples() {
        assert_eq!(
            keywords_to_sequence("autofluorescence imaging, AMD"),
            toks(&["autofluorescence", "imaging", SEP_TOKEN, "amd"])
        );
        assert_eq!(keywords_to_sequence("drusen"), toks(&["drusen"]));
        assert!(keywords_to_sequence(",,").is_empty());
        assert_eq!(
            keywords_to_sequence(",a,, b ,"),
            toks(&["a", SEP_TOKEN, "b"])
        );
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once.join(" ")), once);
        }

        #[test]
        fn separators_never_lead_trail_or_repeat(s in "[a-z ,]{0,30}") {
            let seq = keywords_to_sequence(&s);
            prop_assert!(seq.first().is_none_or(|t| t != SEP_TOKEN));
            prop_assert!(seq.last().is_none_or(|t| t != SEP_TOKEN));
            prop_assert!(seq.windows(2).all(|w| !(w[0] == SEP_TOKEN && w[1] == SEP_TOKEN)));
        }
    }
}
