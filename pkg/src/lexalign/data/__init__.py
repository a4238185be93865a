from lexalign.data.batching import Batch, ImageCache, make_batches
from lexalign.data.coco import build_grounded_corpus
from lexalign.data.corpus import CorpusManifest, GroundedSample
from lexalign.data.synthetic import SynthConfig, generate_synthetic_corpus
from lexalign.data.tokenizer import TokenSequence, Vocab, tokenize

__all__ = [
    "Batch",
    "CorpusManifest",
    "GroundedSample",
    "ImageCache",
    "SynthConfig",
    "TokenSequence",
    "Vocab",
    "build_grounded_corpus",
    "generate_synthetic_corpus",
    "make_batches",
    "tokenize",
]
