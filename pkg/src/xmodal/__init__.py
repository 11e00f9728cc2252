"""Cross-modality spatial embeddings with unsupervised rigid registration,
evaluated on synthetic body phantoms with exact ground truth."""

__version__ = "0.1.0"

from xmodal.rigid import RigidTransform2D, identity, apply, compose, invert
from xmodal.phantom import GeneratorConfig, PhantomPair, generate_dataset, load_split
from xmodal.encoder import EncoderConfig, DualEncoder, init_params, encode
from xmodal.similarity import correlation_map, similarity_score, similarity_matrix
from xmodal.train import TrainConfig, nce_loss
from xmodal import train  # re-bind the submodule over the name imports above

__all__ = [
    "RigidTransform2D", "identity", "apply", "compose", "invert",
    "GeneratorConfig", "PhantomPair", "generate_dataset", "load_split",
    "EncoderConfig", "DualEncoder", "init_params", "encode",
    "correlation_map", "similarity_score", "similarity_matrix",
    "TrainConfig", "nce_loss", "train",
]
