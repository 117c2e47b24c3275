//! Fixtures shared by the benchmarks.

use pausekit::models::{Arch, EncoderConfig, ModelConfig, PauseModel};
use pausekit::nncore::layers::Positional;
use pausekit::pausecat::DurationCategorizer;
use pausekit::synth::{contrasting_styles, synth_corpus, Lexicon, SynthCorpus};

pub fn corpus(sentences: usize) -> SynthCorpus {
    synth_corpus(&contrasting_styles(0.2), sentences, &Lexicon::toy(), &DurationCategorizer::default(), 11)
        .expect("toy corpus")
}

/// The desk-scale model used by the CLI defaults.
pub fn toy_model(arch: Arch, corpus: &SynthCorpus) -> PauseModel {
    let speakers = corpus.styles.iter().map(|s| s.speaker.clone()).collect();
    let mut c = ModelConfig::full_size(arch, corpus.vocab.len(), speakers);
    c.encoder = match arch {
        Arch::Baseline | Arch::BaselineSpk => EncoderConfig::StaticEmbedding { dim: 64 },
        Arch::Rpi | Arch::Cpi => {
            EncoderConfig::Transformer { layers: 2, heads: 4, model_dim: 64, ff_dim: 128, positional: Positional::Sinusoidal }
        }
    };
    c.hidden_dim = 64;
    c.decoder_bilstm_hidden = 32;
    c.bilstmp_hidden = 64;
    c.bilstmp_projection = 32;
    PauseModel::new(c, 0).expect("toy model")
}
