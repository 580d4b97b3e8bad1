//! Content and speaker embeddings, their file format, and a synthetic corpus.

mod array;
mod synth;
mod types;

pub use array::{Array, Dtype};
pub use synth::{synthesize_corpus, ContentScript, SpeakerStyle, SynthClip, SynthCorpus, SynthSpec};
pub use types::{
    attach_projection, load_embedding, project_speaker, ContentEmbedding, Embedding, EmbeddingKind, SpeakerEmbedding,
    DEFAULT_CONTENT_DIM, PROJECTED_DIM, SPEAKER_DIM,
};
