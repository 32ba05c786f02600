mod common;

use common::*;
use resflow::tokenizer::BpeVocab;

fn gpt2() -> BpeVocab {
    BpeVocab::from_files(gpt2_assets().join("vocab.json"), gpt2_assets().join("merges.txt")).unwrap()
}

#[test]
fn reference_ids_for_known_strings() {
    let vocab = gpt2();
    assert_eq!(vocab.encode("Hello world"), vec![15496, 995]);
    assert_eq!(
        vocab.encode("The capital of France is"),
        vec![464, 3139, 286, 4881, 318]
    );
    assert_eq!(vocab.encode(" Paris"), vec![6342]);
    assert_eq!(vocab.token_string(6342), " Paris");
}

#[test]
fn corpus_matches_reference_tokenizer() {
    let vocab = gpt2();
    let corpus = tokenizer_corpus();
    assert_eq!(corpus.len(), 1000);
    let mismatches: Vec<&str> = corpus
        .iter()
        .filter(|line| vocab.encode(&line.text) != line.ids)
        .map(|line| line.text.as_str())
        .collect();
    assert!(
        mismatches.is_empty(),
        "{} mismatches, first: {:?}",
        mismatches.len(),
        mismatches.first()
    );
}

#[test]
fn corpus_round_trips() {
    let vocab = gpt2();
    for line in tokenizer_corpus() {
        assert_eq!(vocab.decode(&line.ids).unwrap(), line.text);
    }
}
