"""Semi-supervised learning of a stereo matching metric from unlabeled
rectified pairs, with winner-take-all evaluation."""
from .dp import MatchPath, filter_occluded_segments, max_average_path
from .embedding import EmbeddingNetwork, load_checkpoint, save_checkpoint
from .losses import LossConfig, Method
from .similarity import SimilarityMatrix, build_banded_similarity
from .training import TrainConfig, train

__version__ = "0.1.0"
