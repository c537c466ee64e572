//! Character-level corpora: vocabulary, JSON Lines loaders, training pairs,
//! batching, and the synthetic topic-labeled generator.

mod batch;
mod loaders;
mod pairs;
mod synth;
mod vocab;

pub use batch::{batch, Batch};
pub use loaders::{
    dialogue_to_jsonl, load_dialogue, load_qa, qa_to_jsonl, read_dialogue, read_qa,
    DialogueExample, DialogueLine, DialogueReader, JsonlReader, LabelSet, QaExample, QaLine,
    QaReader,
};
pub use pairs::{
    concat_context, dialogue_context, frame_target, pair_from_qa, pairs_from_dialogue,
    TrainingPair, DEFAULT_MAX_CONTEXT_LEN, DEFAULT_WINDOW,
};
pub use synth::{synth_generate, SyntheticCorpus, SyntheticSpec, SyntheticWorld};
pub use vocab::{Vocabulary, BOS, EOS, NUM_RESERVED, PAD, SEP, UNK, VOCAB_HEADER};
