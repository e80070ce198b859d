//! Frozen image-text embedders and the two semantic losses.

mod bank;
mod embedder;
mod loss;

pub use bank::EmbeddingBank;
pub use embedder::{
    fnv1a, load_embedding_bank, visual_words, words, BankEmbedder, EmbedderKind, FrozenEmbedder, StubEmbedder,
    TextEmbeddingBank,
};
pub use loss::{
    consistency_loss, feature_align_loss, feature_align_loss_grad, semantic_terms_grad, similarity_distribution,
    ConsistencyTerms, SemanticTerms,
};
