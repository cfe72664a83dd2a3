from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Tuple

import torch
from torch import nn

from floodcast.errors import NonFiniteError, ValidationError
from floodcast.layers.embedding import EmbeddingMLP
from floodcast.recurrent import lstm_recurrence

__all__ = ["ModelConfig", "StreamflowLSTM", "N_SEASONAL", "N_FORCINGS"]

N_FORCINGS = 5
N_SEASONAL = 4


@dataclass(frozen=True)
class ModelConfig:
    """
    Parameters
    ----------
    hidden_size: int
        LSTM hidden state size.
    dropout_p: float
        Dropout probability on the LSTM output, in [0, 1).
    embed_layers: tuple of int
        Widths of the embedding MLPs. Static and dynamic branches share them.
    window: int
        Input sequence length in days.
    horizon: int
        Number of final steps that produce predictions.
    n_dynamic: int
        Dynamic features per step: forcings plus seasonal encodings.
    n_static: int
        Static features: catchment attributes plus the UTC offset.
    """

    hidden_size: int = 1024
    dropout_p: float = 0.4
    embed_layers: Tuple[int, ...] = (30, 20, 64)
    window: int = 180
    horizon: int = 10
    n_dynamic: int = N_FORCINGS + N_SEASONAL
    n_static: int = 203

    def __post_init__(self):
        object.__setattr__(self, "embed_layers", tuple(int(w) for w in self.embed_layers))
        if self.hidden_size < 1:
            raise ValidationError("'hidden_size' must be positive.")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError(f"'dropout_p' must be in [0, 1), got {self.dropout_p}.")
        if not self.embed_layers or min(self.embed_layers) < 1:
            raise ValidationError("'embed_layers' must be positive widths.")
        if not 0 < self.horizon < self.window:
            raise ValidationError(f"'horizon' must be in (0, window), got {self.horizon} with window {self.window}.")
        if self.n_dynamic < 1 or self.n_static < 1:
            raise ValidationError("'n_dynamic' and 'n_static' must be positive.")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["embed_layers"] = list(self.embed_layers)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValidationError(f"Unknown model options: {unknown}.")
        return cls(**data)


class StreamflowLSTM(nn.Module):
    """
    Single-layer LSTM forecaster.

    Every step, the dynamic features and the static features pass through
    their own embedding MLP; both embeddings are concatenated and fed to the
    LSTM. The outputs of the final ``horizon`` steps go through dropout
    (training only, inverted scaling) and a linear head shared across steps.

    Parameters
    ----------
    config: ModelConfig
        Architecture.
    generator: torch.Generator or None
        Source of randomness for the initial weights.
    """

    def __init__(self, config: ModelConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = config
        hidden = config.hidden_size
        self.dynamic_embedding = EmbeddingMLP(config.n_dynamic, config.embed_layers, generator)
        self.static_embedding = EmbeddingMLP(config.n_static, config.embed_layers, generator)
        n_inputs = self.dynamic_embedding.out_features + self.static_embedding.out_features
        self.weight_ih = nn.Parameter(torch.empty(4 * hidden, n_inputs))
        self.weight_hh = nn.Parameter(torch.empty(4 * hidden, hidden))
        self.bias = nn.Parameter(torch.empty(4 * hidden))
        self.head = nn.Linear(hidden, 1)
        self.reset_parameters(generator)

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None):
        hidden = self.config.hidden_size
        bound = hidden**-0.5
        for param in (self.weight_ih, self.weight_hh, self.bias):
            param.uniform_(-bound, bound, generator=generator)
        # forget gate starts open
        self.bias[hidden : 2 * hidden] += 1.0
        self.head.weight.uniform_(-bound, bound, generator=generator)
        self.head.bias.zero_()

    def forward(
        self, dynamic: torch.Tensor, static: torch.Tensor, generator: Optional[torch.Generator] = None
    ) -> torch.Tensor:
        """
        Parameters
        ----------
        dynamic: torch.Tensor
            Scaled dynamic inputs, shape (batch, window, n_dynamic).
        static: torch.Tensor
            Scaled static inputs, shape (batch, n_static).
        generator: torch.Generator or None
            Source of randomness for dropout masks.

        Returns
        -------
        torch.Tensor
            Normalized discharge for the last ``horizon`` steps, (batch, horizon).
        """
        cfg = self.config
        if not dynamic.ndim == 3:
            raise ValueError("'dynamic' must be 3D, (batch, window, n_dynamic)")
        if dynamic.shape[1:] != (cfg.window, cfg.n_dynamic):
            raise ValueError(f"'dynamic' must have shape (batch, {cfg.window}, {cfg.n_dynamic}), got {tuple(dynamic.shape)}")
        if static.shape != (dynamic.shape[0], cfg.n_static):
            raise ValueError(f"'static' must have shape ({dynamic.shape[0]}, {cfg.n_static}), got {tuple(static.shape)}")
        if not (torch.isfinite(dynamic).all() and torch.isfinite(static).all()):
            raise NonFiniteError("Model inputs contain non-finite values.")

        batch = dynamic.shape[0]
        embedded_static = self.static_embedding(static).unsqueeze(1).expand(-1, cfg.window, -1)
        x = torch.cat((self.dynamic_embedding(dynamic), embedded_static), dim=-1)

        state = x.new_zeros(batch, cfg.hidden_size)
        h_seq = lstm_recurrence(x.contiguous(), state, state, self.weight_ih, self.weight_hh, self.bias)
        out = h_seq[:, -cfg.horizon :]

        if self.training and cfg.dropout_p > 0:
            keep = 1.0 - cfg.dropout_p
            mask = torch.bernoulli(torch.full_like(out, keep), generator=generator)
            out = out * mask / keep
        return self.head(out).squeeze(-1)
