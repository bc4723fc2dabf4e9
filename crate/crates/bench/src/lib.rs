//! Fixtures shared by the forward/backward benchmarks.

use gazeattn_core::toy::{
    toy_compression_corpus, toy_paragen_config, toy_paraphrase_corpus, toy_sentcomp_config, toy_tsm_checkpoint,
};
use gazeattn_core::{DeletionExample, ParagenModel, SentcompModel, SentencePair, TsmModel};

pub struct Fixture {
    pub tsm: TsmModel,
    pub paragen: ParagenModel,
    pub sentcomp: SentcompModel,
    pub pair: SentencePair,
    pub example: DeletionExample,
}

/// Toy-sized models on the toy corpora.
pub fn fixture() -> Fixture {
    let pairs = toy_paraphrase_corpus(1).expect("toy paraphrase corpus");
    let comp = toy_compression_corpus(1).expect("toy compression corpus");
    let mut sentences: Vec<Vec<String>> = pairs.iter().map(|p| p.source.clone()).collect();
    sentences.extend(comp.iter().map(|e| e.tokens.clone()));
    let tsm = TsmModel::from_checkpoint(&toy_tsm_checkpoint(&sentences, 1).expect("toy TSM")).expect("load TSM");
    let paragen = ParagenModel::for_corpus(toy_paragen_config(), &pairs, 1).expect("paragen");
    let sentcomp = SentcompModel::for_corpus(toy_sentcomp_config(), &comp, 1).expect("sentcomp");
    Fixture {
        tsm,
        paragen,
        sentcomp,
        pair: pairs[0].clone(),
        example: comp[0].clone(),
    }
}
