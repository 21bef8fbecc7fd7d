from ._ami import (
    BOS,
    EOS,
    FIRST_CONTENT,
    PAD,
    CheckpointError,
    NumericError,
    Vocab,
    __version__,
    bleu,
    checkpoint_info,
    dist_n,
    embedding_relevance,
    ent_4,
    exact_mi,
    file_fingerprint,
    generate,
    load_corpus,
    parse_config,
    run_cli,
    source_entropy,
)
