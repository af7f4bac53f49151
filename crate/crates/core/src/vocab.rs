//! Fixed 64-token closed vocabulary shared by the generator and the model.

pub const PAD: usize = 0;
pub const EOT: usize = 1;
pub const SEP: usize = 2;
pub const YES: usize = 3;
pub const IMAGE: usize = 4;

pub const SIZE: usize = 64;

const WORDS: [&str; SIZE] = [
    "<pad>",
    "<eot>",
    "<sep>",
    "yes",
    "image",
    "1",
    "2",
    "3", // 0-7
    "logo",
    "blur",
    "duplicate",
    "color",
    "order",
    "circle",
    "square",
    "triangle", // 8-15
    "star",
    "red",
    "orange",
    "yellow",
    "green",
    "cyan",
    "blue",
    "purple", // 16-23
    "pink",
    "small",
    "medium",
    "large",
    "cup",
    "lamp",
    "bag",
    "shoe", // 24-31
    "toy",
    "box",
    "vase",
    "clock",
    "hat",
    "bottle",
    "mug",
    "plate", // 32-39
    "new",
    "classic",
    "premium",
    "soft",
    "bright",
    "matte",
    "glossy",
    "set", // 40-47
    "for",
    "home",
    "kids",
    "office",
    "travel",
    "gift",
    "with",
    "and", // 48-55
    "4",
    "5",
    "6",
    "7",
    "8",
    "9",
    "<unk>",
    "<mask>", // 56-63
];

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const COLORS: [&str; 8] = ["red", "orange", "yellow", "green", "cyan", "blue", "purple", "pink"];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];
pub const NOUNS: [&str; 12] = [
    "cup", "lamp", "bag", "shoe", "toy", "box", "vase", "clock", "hat", "bottle", "mug", "plate",
];

pub fn id(word: &str) -> Option<usize> {
    WORDS.iter().position(|w| *w == word)
}

pub fn word(id: usize) -> Option<&'static str> {
    WORDS.get(id).copied()
}

/// Tokenizes whitespace-separated words; `None` if any word is unknown.
pub fn tokenize(text: &str) -> Option<Vec<usize>> {
    text.split_whitespace().map(id).collect()
}

/// Token for a 1-based image position.
pub fn index_token(one_based: usize) -> Option<usize> {
    id(&one_based.to_string())
}

pub fn detokenize(ids: &[usize]) -> Option<String> {
    let words: Option<Vec<&str>> = ids.iter().map(|&i| word(i)).collect();
    words.map(|w| w.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_are_unique_and_specials_fixed() {
        for (i, w) in WORDS.iter().enumerate() {
            assert_eq!(id(w), Some(i), "{w}");
        }
        assert_eq!(word(SEP), Some("<sep>"));
        assert_eq!(word(YES), Some("yes"));
        assert_eq!(word(IMAGE), Some("image"));
        for w in SHAPES.iter().chain(&COLORS).chain(&SIZES).chain(&NOUNS) {
            assert!(id(w).is_some(), "{w}");
        }
    }

    #[test]
    fn round_trip() {
        let ids = tokenize("logo image 1").unwrap();
        assert_eq!(detokenize(&ids).unwrap(), "logo image 1");
        assert!(tokenize("unknownword").is_none());
        assert_eq!(index_token(3), id("3"));
    }
}
