mod common;

use codec_lm::corpus::{phonemes_in_span, Corpus, Split};
use codec_lm::frontend::{dedup_consecutive, text_to_phonemes};

#[test]
fn alignments_survive_a_reload_and_cover_each_utterance() {
    let dir = tempfile::tempdir().unwrap();
    let built = common::small_corpus(dir.path(), 3, 2, 1, 1.0, 2.0);
    let loaded = Corpus::load(&built.root).unwrap();
    assert_eq!(built.entries, loaded.entries);
    assert_eq!(loaded.split(Split::Eval).count(), 2);
    for e in &loaded.entries {
        let len = loaded.audio(e).unwrap().len();
        assert!(!e.alignment.is_empty());
        assert_eq!(e.alignment.first().unwrap().start, 0);
        assert_eq!(e.alignment.last().unwrap().end, len);
        for w in e.alignment.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        // the whole span gives back the transcription's phonemes
        let all = phonemes_in_span(&e.alignment, 0, len);
        let text = text_to_phonemes(&e.text).unwrap();
        assert_eq!(dedup_consecutive(&all), dedup_consecutive(text.ids()), "{}", e.utt_id);
    }
}

#[test]
fn corpus_generation_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let x = common::small_corpus(a.path(), 2, 2, 1, 1.0, 1.5);
    let y = common::small_corpus(b.path(), 2, 2, 1, 1.0, 1.5);
    for (p, q) in x.entries.iter().zip(&y.entries) {
        let wa = std::fs::read(x.root.join(&p.relative_path)).unwrap();
        let wb = std::fs::read(y.root.join(&q.relative_path)).unwrap();
        assert_eq!(wa, wb, "{}", p.utt_id);
    }
}
