from .embedding import EmbeddingMLP, mlp_forward
from .forecaster import ModelConfig, StreamflowLSTM
