use serde::{Deserialize, Serialize};

/// String transformations available as tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    Copy,
    Reverse,
    Rot1,
    SortChars,
    UppercaseShift,
    DuplicateEachChar,
    SwapPairs,
    RemoveVowels,
    FirstHalf,
    LastChar,
    AppendLengthDigit,
    SurroundWithBrackets,
    SortCharsDescending,
    Rot2,
}

/// Meta-train candidates, in the order they are taken for a suite of `n`.
pub const TRAIN_FAMILIES: [TaskFamily; 10] = [
    TaskFamily::Copy,
    TaskFamily::Reverse,
    TaskFamily::UppercaseShift,
    TaskFamily::Rot1,
    TaskFamily::DuplicateEachChar,
    TaskFamily::FirstHalf,
    TaskFamily::LastChar,
    TaskFamily::SortChars,
    TaskFamily::RemoveVowels,
    TaskFamily::SwapPairs,
];

/// Default meta-train suite size.
pub const DEFAULT_TRAIN_TASKS: usize = 8;

pub const VALID_FAMILIES: [TaskFamily; 2] = [TaskFamily::AppendLengthDigit, TaskFamily::SurroundWithBrackets];

pub const TEST_FAMILIES: [TaskFamily; 2] = [TaskFamily::SortCharsDescending, TaskFamily::Rot2];

fn shift_letters(s: &str, k: u8) -> String {
    s.chars()
        .map(|c| match c {
            'a'..='z' => ((c as u8 - b'a' + k) % 26 + b'a') as char,
            'A'..='Z' => ((c as u8 - b'A' + k) % 26 + b'A') as char,
            other => other,
        })
        .collect()
}

impl TaskFamily {
    pub fn id(self) -> &'static str {
        match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::Rot1 => "rot-1",
            Self::SortChars => "sort-chars",
            Self::UppercaseShift => "uppercase-shift",
            Self::DuplicateEachChar => "duplicate-each-char",
            Self::SwapPairs => "swap-pairs",
            Self::RemoveVowels => "remove-vowels",
            Self::FirstHalf => "first-half",
            Self::LastChar => "last-char",
            Self::AppendLengthDigit => "append-length-digit",
            Self::SurroundWithBrackets => "surround-with-brackets",
            Self::SortCharsDescending => "sort-chars-descending",
            Self::Rot2 => "rot-2",
        }
    }

    pub fn definition(self) -> &'static str {
        match self {
            Self::Copy => "copy the input",
            Self::Reverse => "reverse the input",
            Self::Rot1 => "shift each letter forward by one",
            Self::SortChars => "sort the letters in ascending order",
            Self::UppercaseShift => "convert the letters to uppercase",
            Self::DuplicateEachChar => "repeat each letter twice",
            Self::SwapPairs => "swap each adjacent pair of letters",
            Self::RemoveVowels => "remove every vowel",
            Self::FirstHalf => "keep the first half of the input",
            Self::LastChar => "output only the last letter",
            Self::AppendLengthDigit => "append the length as a digit",
            Self::SurroundWithBrackets => "surround the input with brackets",
            Self::SortCharsDescending => "sort the letters in descending order",
            Self::Rot2 => "shift each letter forward by two",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        TRAIN_FAMILIES
            .iter()
            .chain(&VALID_FAMILIES)
            .chain(&TEST_FAMILIES)
            .copied()
            .find(|f| f.id() == id)
    }

    /// The ground-truth transformation.
    pub fn apply(self, s: &str) -> String {
        let chars: Vec<char> = s.chars().collect();
        match self {
            Self::Copy => s.to_string(),
            Self::Reverse => chars.iter().rev().collect(),
            Self::Rot1 => shift_letters(s, 1),
            Self::Rot2 => shift_letters(s, 2),
            Self::SortChars => {
                let mut c = chars;
                c.sort_unstable();
                c.into_iter().collect()
            }
            Self::SortCharsDescending => {
                let mut c = chars;
                c.sort_unstable_by(|a, b| b.cmp(a));
                c.into_iter().collect()
            }
            Self::UppercaseShift => s.to_ascii_uppercase(),
            Self::DuplicateEachChar => chars.iter().flat_map(|&c| [c, c]).collect(),
            Self::SwapPairs => chars
                .chunks(2)
                .flat_map(|p| p.iter().rev().copied().collect::<Vec<_>>())
                .collect(),
            Self::RemoveVowels => chars.into_iter().filter(|c| !"aeiou".contains(*c)).collect(),
            Self::FirstHalf => chars[..chars.len() / 2].iter().collect(),
            Self::LastChar => chars.last().map(|c| c.to_string()).unwrap_or_default(),
            Self::AppendLengthDigit => format!("{s}{}", chars.len() % 10),
            Self::SurroundWithBrackets => format!("[{s}]"),
        }
    }
}
