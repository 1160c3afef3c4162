from .discriminative import DiscriminativeSet, SkipReport, build_discriminative_sets
from .pororo import export_pororo_sv, load_pororo_sv
from .shape_stories import (
    ROSTER,
    generate_shape_stories,
    labels_from_caption,
    parse_caption,
    render_frame,
    split_dataset,
)
from .story import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    Story,
    StoryBatch,
    StoryDataset,
    StoryTensorDataset,
    Vocabulary,
    collate_stories,
    make_batch,
    tokenize,
)
