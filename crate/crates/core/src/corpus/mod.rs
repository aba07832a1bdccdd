//! Synthetic shape-world data: scenes, captions, splits and corpora.

pub mod dataset;
pub mod grammar;
pub mod scene;

pub use dataset::{
    distinct_caption_count, gen_heldout_split, gen_paired_dataset, gen_paired_shards,
    gen_sentence_corpus, gen_video_split, load_corpus, load_split, load_video, save_corpus,
    save_split, save_video, withheld_combos, CorpusParams, Coverage, DatasetSplit, Motion, Pair,
    SentenceCorpus, VideoClip, VideoSplit,
};
pub use grammar::{
    all_captions, caption_of, color_question, next_words, parse_caption, qa_sentence,
    scene_context, Caption, NextWords, MAX_CAPTION_TOKENS, TEMPLATE_COUNT,
};
pub use scene::{
    gen_scene, render, Color, FeatureGrid, ObjectSpec, SceneParams, SceneSpec, Shape, Size,
    CELL_CHANNELS,
};
