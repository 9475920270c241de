"""Joint video-paragraph retrieval and weakly supervised sentence grounding."""
from .config import TrainConfig, load_config
from .data import (Corpus, CorpusRecord, ParagraphRecord, SyntheticSpec, generate_synthetic_corpus,
                   load_corpus, read_annotations, read_features, save_corpus, write_features)
from .evaluation import evaluate, ground, recall_at_k_iou, retrieve
from .model import GroundingRetrievalModel
from .moments import MomentIndex, TimeInterval, enumerate_moments, moment_to_interval, temporal_iou
from .trainer import load_checkpoint, restore, save_checkpoint, train, train_to_end

__version__ = "0.1.0"
