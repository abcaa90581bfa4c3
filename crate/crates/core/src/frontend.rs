//! Rule-based text to pseudo-phoneme conversion.
//!
//! Pseudo-phonemes are normalized characters plus a handful of digraphs. The
//! vocabulary has [`PHONEME_VOCAB`] ids; id 0 is padding and is never emitted.
//! The phoneme end-of-sequence token lives outside this range (see
//! [`crate::lm::vocab`]).

use crate::error::{Error, Result};

/// Size of the phoneme vocabulary, including the reserved padding id.
pub const PHONEME_VOCAB: usize = 64;
pub const PAD_ID: u16 = 0;
/// Id emitted for a run of whitespace.
pub const WORD_BOUNDARY_ID: u16 = 27;

const DIGRAPHS: [(&str, u16); 6] = [
    ("sh", 28),
    ("ch", 29),
    ("th", 30),
    ("ng", 31),
    ("ph", 32),
    ("wh", 33),
];
const DIGIT_BASE: u16 = 34;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSeq {
    ids: Vec<u16>,
    source_text: String,
}

impl PhonemeSeq {
    /// Wraps already-normalized ids. Fails on out-of-vocabulary ids, padding,
    /// or adjacent repeats.
    pub fn from_ids(ids: Vec<u16>, source_text: impl Into<String>) -> Result<Self> {
        if let Some(&bad) = ids
            .iter()
            .find(|&&i| i == PAD_ID || i as usize >= PHONEME_VOCAB)
        {
            return Err(Error::out_of_range(
                "phoneme id",
                bad as i64,
                format!("[1, {})", PHONEME_VOCAB),
            ));
        }
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("ids", "adjacent repeated phoneme"));
        }
        Ok(Self {
            ids,
            source_text: source_text.into(),
        })
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Concatenation followed by re-normalization at the seam.
    pub fn concat(&self, other: &PhonemeSeq) -> PhonemeSeq {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        let mut text = self.source_text.clone();
        if !text.is_empty() && !other.source_text.is_empty() {
            text.push(' ');
        }
        text.push_str(&other.source_text);
        PhonemeSeq {
            ids: dedup_consecutive(&ids),
            source_text: text,
        }
    }
}

/// Removes adjacent repetitions, keeping the first element of each run.
pub fn dedup_consecutive<T: PartialEq + Copy>(ids: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(ids.len());
    for &id in ids {
        if out.last() != Some(&id) {
            out.push(id);
        }
    }
    out
}

fn letter_id(c: char) -> Option<u16> {
    match c {
        'a'..='z' => Some(c as u16 - 'a' as u16 + 1),
        '0'..='9' => Some(DIGIT_BASE + (c as u16 - '0' as u16)),
        _ => None,
    }
}

/// Maps text to a deduplicated pseudo-phoneme sequence.
pub fn text_to_phonemes(text: &str) -> Result<PhonemeSeq> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(Error::invalid("text", "empty after trimming whitespace"));
    }
    let lower: Vec<char> = trimmed.to_lowercase().chars().collect();
    let mut ids = Vec::with_capacity(lower.len());
    let mut i = 0;
    while i < lower.len() {
        let c = lower[i];
        if c.is_whitespace() {
            ids.push(WORD_BOUNDARY_ID);
            i += 1;
            continue;
        }
        if i + 1 < lower.len() {
            let pair: String = [c, lower[i + 1]].iter().collect();
            if let Some(&(_, id)) = DIGRAPHS.iter().find(|(d, _)| *d == pair) {
                ids.push(id);
                i += 2;
                continue;
            }
        }
        if let Some(id) = letter_id(c) {
            ids.push(id);
        }
        i += 1;
    }
    let mut ids = dedup_consecutive(&ids);
    // boundaries left dangling by dropped characters carry no content
    while ids.first() == Some(&WORD_BOUNDARY_ID) {
        ids.remove(0);
    }
    while ids.last() == Some(&WORD_BOUNDARY_ID) {
        ids.pop();
    }
    if ids.is_empty() {
        return Err(Error::invalid(
            "text",
            format!("{trimmed:?} maps to an empty phoneme sequence"),
        ));
    }
    Ok(PhonemeSeq {
        ids,
        source_text: trimmed.to_string(),
    })
}

/// Printable symbol for a phoneme id.
pub fn symbol(id: u16) -> Option<String> {
    match id {
        PAD_ID => Some("<pad>".into()),
        1..=26 => Some(((b'a' + (id - 1) as u8) as char).to_string()),
        WORD_BOUNDARY_ID => Some("<sp>".into()),
        _ => {
            if let Some((d, _)) = DIGRAPHS.iter().find(|(_, i)| *i == id) {
                Some(d.to_string())
            } else if (DIGIT_BASE..DIGIT_BASE + 10).contains(&id) {
                Some(((b'0' + (id - DIGIT_BASE) as u8) as char).to_string())
            } else {
                None
            }
        }
    }
}

/// `id=symbol` lines for every assigned id; embedded in checkpoints.
pub fn vocabulary_table() -> String {
    (0..PHONEME_VOCAB as u16)
        .filter_map(|id| symbol(id).map(|s| format!("{id}={s}")))
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference_dedup(s: &[u16]) -> Vec<u16> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < s.len() {
            out.push(s[i]);
            let mut j = i + 1;
            while j < s.len() && s[j] == s[i] {
                j += 1;
            }
            i = j;
        }
        out
    }

    #[test]
    fn repeated_letters_collapse() {
        let p = text_to_phonemes("aa").unwrap();
        assert_eq!(p.ids(), &[1]);
        let p = text_to_phonemes("aba").unwrap();
        assert_eq!(p.ids(), &[1, 2, 1]);
    }

    #[test]
    fn empty_and_unmappable_text_rejected() {
        assert!(text_to_phonemes("").is_err());
        assert!(text_to_phonemes("   \t").is_err());
        assert!(text_to_phonemes("?!,").is_err());
    }

    #[test]
    fn digraphs_case_and_spaces() {
        let p = text_to_phonemes("  SHip  the ").unwrap();
        assert_eq!(p.ids(), &[28, 9, 16, WORD_BOUNDARY_ID, 30, 5]);
        assert_eq!(p.source_text(), "SHip  the");
    }

    #[test]
    fn dedup_examples() {
        assert_eq!(dedup_consecutive(&[5u16, 5, 5, 2, 2, 5]), vec![5, 2, 5]);
        assert!(dedup_consecutive::<u16>(&[]).is_empty());
    }

    #[test]
    fn dedup_matches_reference_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.random_range(0..40);
            let s: Vec<u16> = (0..n).map(|_| rng.random_range(0..4)).collect();
            assert_eq!(dedup_consecutive(&s), reference_dedup(&s));
        }
    }

    #[test]
    fn concat_renormalizes_seam() {
        let a = text_to_phonemes("ab").unwrap();
        let b = text_to_phonemes("bc").unwrap();
        assert_eq!(a.concat(&b).ids(), &[1, 2, 3]);
    }

    #[test]
    fn from_ids_validates() {
        assert!(PhonemeSeq::from_ids(vec![0], "").is_err());
        assert!(PhonemeSeq::from_ids(vec![64], "").is_err());
        assert!(PhonemeSeq::from_ids(vec![3, 3], "").is_err());
        assert!(PhonemeSeq::from_ids(vec![3, 4], "").is_ok());
    }

    #[test]
    fn vocabulary_table_lists_symbols() {
        let t = vocabulary_table();
        assert!(t.starts_with("0=<pad>,1=a,"));
        assert!(t.contains("28=sh"));
    }

    proptest::proptest! {
        #[test]
        fn dedup_idempotent(s in proptest::collection::vec(0u16..6, 0..50)) {
            let once = dedup_consecutive(&s);
            proptest::prop_assert_eq!(dedup_consecutive(&once), once.clone());
            proptest::prop_assert!(once.windows(2).all(|w| w[0] != w[1]));
        }

        #[test]
        fn phonemes_stay_in_vocab(text in "[ -~]{1,40}") {
            if let Ok(p) = text_to_phonemes(&text) {
                proptest::prop_assert!(p.ids().iter().all(|&i| i > 0 && (i as usize) < PHONEME_VOCAB));
                proptest::prop_assert!(p.ids().windows(2).all(|w| w[0] != w[1]));
                proptest::prop_assert_eq!(text_to_phonemes(&text).unwrap(), p);
            }
        }
    }
}
