"""
Training of the forecaster: sequence sampling, basin-normalized loss,
gradient clipping, Adam updates under a warmup + cosine schedule, and the
two-stage procedure (pre-training on reanalysis forcings, fine-tuning on
forecast forcings).
"""

import copy
import datetime
import logging
import math
import pickle
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from floodcast.errors import NonFiniteError, TrainingDivergedError, ValidationError
from floodcast.hydrodata import (
    FORCING_VARIABLES,
    TARGET_NAME,
    UTC_OFFSET_NAME,
    Period,
    ScalerStats,
    seasonal_features,
)
from floodcast.io import Dataset
from floodcast.layers import ModelConfig, StreamflowLSTM

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """
    Parameters
    ----------
    lr_init: float
        Peak learning rate reached at the end of warmup.
    epochs: int
        Number of epochs.
    warmup_epochs: int
        Epochs of linear warmup from 0 to ``lr_init``.
    updates_per_epoch: int
        Cap on optimizer updates per epoch.
    batch_size: int
        Sequences per update.
    grad_clip_norm: float
        Global L2 norm above which gradients are rescaled.
    target_noise_sigma: float
        Std of Gaussian noise added to normalized targets during training.
    epsilon_loss: float
        Added to the squared basin sigma in the loss denominator.
    validation_every: int
        Epochs between validation passes. The last epoch is always validated.
    """

    lr_init: float = 4e-4
    epochs: int = 100
    warmup_epochs: int = 10
    updates_per_epoch: int = 10_000
    batch_size: int = 512
    grad_clip_norm: float = 1.0
    target_noise_sigma: float = 0.02
    epsilon_loss: float = 0.1
    validation_every: int = 10
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.lr_init < 0:
            raise ValidationError("'lr_init' must be non-negative.")
        if self.epochs < 1:
            raise ValidationError("'epochs' must be positive.")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValidationError(f"'warmup_epochs' must be in [0, epochs), got {self.warmup_epochs}.")
        if self.updates_per_epoch < 1 or self.batch_size < 1 or self.validation_every < 1:
            raise ValidationError("'updates_per_epoch', 'batch_size' and 'validation_every' must be positive.")
        if not self.grad_clip_norm > 0:
            raise ValidationError("'grad_clip_norm' must be positive.")
        if self.target_noise_sigma < 0 or not self.epsilon_loss > 0:
            raise ValidationError("'target_noise_sigma' must be non-negative and 'epsilon_loss' positive.")

    @classmethod
    def pretrain_defaults(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def finetune_defaults(cls, **overrides) -> "TrainConfig":
        return cls(**{"lr_init": 1e-4, "epochs": 30, "warmup_epochs": 5, **overrides})

    def to_dict(self) -> dict:
        out = asdict(self)
        out["adam_betas"] = list(self.adam_betas)
        return out

    @classmethod
    def from_dict(cls, data: Mapping, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValidationError(f"Unknown training options: {unknown}.")
        return replace(base or cls(), **data)


def lr_schedule(epoch: float, config: TrainConfig) -> float:
    """
    Learning rate at a (possibly fractional) epoch: linear warmup from 0 to
    ``lr_init``, then cosine decay reaching 0 at ``config.epochs``.
    """
    if not 0 <= epoch < config.epochs:
        raise ValidationError(f"'epoch' must be in [0, {config.epochs}), got {epoch}.")
    w, total = config.warmup_epochs, config.epochs
    if epoch < w:
        return config.lr_init * epoch / w
    return config.lr_init * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (total - w)))


def add_target_noise(targets: torch.Tensor, sigma: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Add N(0, sigma^2) noise to every present target; missing (NaN) entries stay missing"""
    if sigma == 0:
        return targets
    noise = torch.randn(targets.shape, generator=generator, dtype=targets.dtype, device=targets.device)
    return targets + sigma * noise


def _loss_terms(pred, target, sigma, epsilon) -> Tuple[torch.Tensor, torch.Tensor]:
    if pred.shape != target.shape:
        raise ValueError(f"'pred' and 'target' must have the same shape, got {tuple(pred.shape)} and {tuple(target.shape)}")
    sigma = torch.as_tensor(sigma, dtype=pred.dtype, device=pred.device)
    if sigma.ndim == 1:
        sigma = sigma.unsqueeze(-1)
    mask = ~torch.isnan(target)
    residual = target.masked_fill(~mask, 0.0) - pred
    terms = residual**2 / (sigma**2 + epsilon) * mask
    return terms.sum(), mask.sum()


def norm_mse_loss(pred: torch.Tensor, target: torch.Tensor, sigma, epsilon: float = 0.1) -> torch.Tensor:
    """
    Basin-normalized squared error, the mean of ``(y - y_hat)^2 / (sigma^2 + epsilon)``
    over the present targets.

    Parameters
    ----------
    pred: torch.Tensor
        Predictions, (batch, horizon).
    target: torch.Tensor
        Targets of the same shape; NaN marks missing values.
    sigma: torch.Tensor or float
        Per-sample basin sigma, shape (batch,), in target units.
    epsilon: float
        Stabilizer for basins with near-constant discharge.
    """
    total, count = _loss_terms(pred, target, sigma, epsilon)
    if count == 0:
        raise ValidationError("Loss has no present targets.")
    return total / count


def global_norm(grads: Sequence[torch.Tensor]) -> float:
    grads = [g for g in grads if g is not None]
    if not grads:
        return 0.0
    return float(torch.sqrt(sum(torch.sum(g.double() ** 2) for g in grads)))


def clip_gradients(grads: Sequence[torch.Tensor], max_norm: float = 1.0) -> List[torch.Tensor]:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``"""
    grads = [g for g in grads if g is not None]
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return grads


def check_gradients(named_parameters) -> None:
    for name, param in named_parameters:
        if param.grad is not None and not torch.isfinite(param.grad).all():
            raise NonFiniteError(f"Gradient of '{name}' is not finite.")


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.lr_init, betas=config.adam_betas, eps=config.adam_eps)


@dataclass
class ModelState:
    """
    Trained model together with everything needed to resume or apply it.

    Parameters
    ----------
    model: StreamflowLSTM
        Network parameters.
    optimizer: torch.optim.Adam
        Optimizer holding the first and second moment accumulators.
    scaler: ScalerStats
        Statistics used to scale inputs and targets at fit time.
    train_config: TrainConfig
        Configuration of the last training stage.
    attribute_names: tuple of str
        Static attribute schema the model was trained on.
    step: int
        Number of optimizer updates applied so far.
    history: list of dict
        One record per epoch.
    """

    model: StreamflowLSTM
    optimizer: torch.optim.Adam
    scaler: ScalerStats
    train_config: TrainConfig
    attribute_names: Tuple[str, ...] = ()
    step: int = 0
    history: List[dict] = field(default_factory=list)

    @property
    def model_config(self) -> ModelConfig:
        return self.model.config

    @property
    def dtype(self) -> torch.dtype:
        return self.model.weight_hh.dtype

    def is_finite(self) -> bool:
        return all(torch.isfinite(p).all() for p in self.model.parameters())

    def copy(self) -> "ModelState":
        model = copy.deepcopy(self.model)
        optimizer = make_optimizer(model, self.train_config)
        optimizer.load_state_dict(copy.deepcopy(self.optimizer.state_dict()))
        return ModelState(
            model, optimizer, self.scaler, self.train_config, self.attribute_names, self.step, copy.deepcopy(self.history)
        )

    def save(self, path) -> Path:
        path = Path(path)
        torch.save(
            {
                "format_version": CHECKPOINT_FORMAT_VERSION,
                "model_config": self.model_config.to_dict(),
                "train_config": self.train_config.to_dict(),
                "model_state": self.model.state_dict(),
                "optimizer_state": self.optimizer.state_dict(),
                "step": self.step,
                "scaler": self.scaler.to_dict(),
                "attribute_names": list(self.attribute_names),
                "history": self.history,
                "dtype": str(self.dtype).replace("torch.", ""),
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path) -> "ModelState":
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
            raise ValidationError(f"Cannot read checkpoint '{path}': {exc}") from exc
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValidationError(f"Unsupported checkpoint format {payload.get('format_version')!r}.")
        model = StreamflowLSTM(ModelConfig.from_dict(payload["model_config"]))
        model.to(getattr(torch, payload["dtype"]))
        model.load_state_dict(payload["model_state"])
        train_config = TrainConfig.from_dict(payload["train_config"])
        optimizer = make_optimizer(model, train_config)
        optimizer.load_state_dict(payload["optimizer_state"])
        return cls(
            model,
            optimizer,
            ScalerStats.from_dict(payload["scaler"]),
            train_config,
            tuple(payload["attribute_names"]),
            int(payload["step"]),
            list(payload["history"]),
        )


def adam_step(state: ModelState, lr: float) -> ModelState:
    """Apply one bias-corrected Adam update with learning rate ``lr`` to the accumulated gradients"""
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.step += 1
    return state


def dynamic_inputs(scaler: ScalerStats, forcing_matrix: np.ndarray, start_date: datetime.date) -> np.ndarray:
    """
    Scaled forcings followed by seasonal encodings, (time, 9).

    Parameters
    ----------
    scaler: ScalerStats
        Input statistics.
    forcing_matrix: np.ndarray
        Raw (time, 5) forcing values, whatever their source.
    start_date: datetime.date
        Date of the first row.
    """
    n = forcing_matrix.shape[0]
    scaled = np.stack([scaler.transform(name, forcing_matrix[:, i]) for i, name in enumerate(FORCING_VARIABLES)], axis=1)
    return np.concatenate([scaled, seasonal_features(start_date, n)], axis=1)


def static_inputs(scaler: ScalerStats, attribute_names: Sequence[str], record) -> np.ndarray:
    return scaler.scale_static(tuple(attribute_names) + (UTC_OFFSET_NAME,), record.static_inputs())


class SequenceDataset(torch.utils.data.Dataset):
    """
    Training windows drawn from every basin over one period.

    A sample is ``(basin, end)``: the ``window`` days ending at ``end`` are
    the inputs and the final ``horizon`` days the targets. Windows with any
    missing input are excluded, as are windows without a single observed
    target. Targets outside the period are treated as missing.

    Parameters
    ----------
    data: Dataset
        Loaded stations and forcings.
    scaler: ScalerStats
        Fitted statistics. Forcings of any source are scaled with them.
    period: Period
        Dates on which windows may end.
    model_config: ModelConfig
        Provides ``window`` and ``horizon``.
    lead_time: int
        0 to use reanalysis forcings, otherwise the forecast lead time whose
        valid-date series fills every step.
    station_ids: sequence of str or None
        Basins to include (default: all).
    basin_sigma: mapping or None
        Station id -> discharge std (mm/d) for the loss weights (default:
        ``scaler.basin_sigma``).
    dtype: torch.dtype
        Tensor precision.
    """

    def __init__(
        self,
        data: Dataset,
        scaler: ScalerStats,
        period,
        model_config: ModelConfig,
        lead_time: int = 0,
        station_ids: Optional[Sequence[str]] = None,
        basin_sigma: Optional[Mapping[str, float]] = None,
        dtype: torch.dtype = torch.float32,
    ):
        period = Period.parse(period)
        window, horizon = model_config.window, model_config.horizon
        self.window, self.horizon, self.dtype = window, horizon, dtype
        self.period, self.lead_time = period, lead_time
        self.station_ids: List[str] = []
        self._inputs: List[np.ndarray] = []
        self._static: List[np.ndarray] = []
        self._targets: List[np.ndarray] = []
        self._sigma: List[float] = []
        samples = []

        if basin_sigma is None:
            basin_sigma = scaler.basin_sigma
        target_std = 1.0 if TARGET_NAME in scaler.constant else scaler.std[TARGET_NAME]
        grid_start = period.start - datetime.timedelta(days=window - 1)
        n = period.n_days + window - 1

        for station_id in sorted(data.records if station_ids is None else station_ids):
            record = data.records[station_id]
            try:
                forcing = data.forcing(station_id, lead_time).reindex(grid_start, n)
            except ValidationError as exc:
                logger.warning("Skipping station %s: %s", station_id, exc)
                continue
            if station_id not in basin_sigma:
                logger.warning("Skipping station %s: no basin sigma", station_id)
                continue
            static = static_inputs(scaler, data.attribute_names, record)
            if not np.isfinite(static).all():
                logger.warning("Skipping station %s: missing static attributes", station_id)
                continue
            inputs = dynamic_inputs(scaler, forcing.matrix(), grid_start)
            target = scaler.transform(TARGET_NAME, record.discharge.reindex(grid_start, n).values)
            target[: window - 1] = np.nan

            ends = np.arange(window - 1, n)
            bad = np.concatenate([[0], np.cumsum(~np.isfinite(inputs).all(axis=1))])
            inputs_ok = bad[ends + 1] - bad[ends + 1 - window] == 0
            present = np.concatenate([[0], np.cumsum(~np.isnan(target))])
            target_ok = present[ends + 1] - present[ends + 1 - horizon] > 0
            ends = ends[inputs_ok & target_ok]
            if ends.size == 0:
                logger.info("Station %s has no usable windows in %s..%s", station_id, *period)
                continue

            basin = len(self.station_ids)
            self.station_ids.append(station_id)
            self._inputs.append(inputs)
            self._static.append(static)
            self._targets.append(target)
            self._sigma.append(basin_sigma[station_id] / target_std)
            samples.append(np.stack([np.full(ends.size, basin), ends], axis=1))

        self.samples = np.concatenate(samples) if samples else np.empty((0, 2), dtype=np.int64)
        self.n_static = self._static[0].size if self._static else len(data.attribute_names) + 1
        logger.info(
            "%d windows from %d basins over %s..%s (lead time %d)",
            len(self.samples), len(self.station_ids), period.start, period.end, lead_time,
        )

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx):
        dynamic, static, target, sigma = self.batch([idx])
        return dynamic[0], static[0], target[0], sigma[0]

    def batch(self, indices) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Stack samples into (dynamic, static, target, sigma) tensors"""
        dynamic, static, target, sigma = [], [], [], []
        for idx in np.asarray(indices, dtype=np.int64):
            basin, end = self.samples[idx]
            dynamic.append(self._inputs[basin][end - self.window + 1 : end + 1])
            static.append(self._static[basin])
            target.append(self._targets[basin][end - self.horizon + 1 : end + 1])
            sigma.append(self._sigma[basin])
        as_tensor = lambda x: torch.as_tensor(np.asarray(x), dtype=self.dtype)
        return as_tensor(dynamic), as_tensor(static), as_tensor(target), as_tensor(sigma)

    def sample_indices(self, batch_size: int, generator: Optional[torch.Generator] = None) -> np.ndarray:
        if len(self) == 0:
            raise ValidationError("No training windows available.")
        return torch.randint(len(self), (batch_size,), generator=generator).numpy()

    def batches(self, batch_size: int) -> Iterator[Tuple[torch.Tensor, ...]]:
        for start in range(0, len(self), batch_size):
            yield self.batch(np.arange(start, min(start + batch_size, len(self))))


@torch.no_grad()
def evaluate_loss(model: StreamflowLSTM, data: SequenceDataset, config: TrainConfig) -> Optional[float]:
    """Mean loss over every window of ``data``, without noise or dropout"""
    if data is None or len(data) == 0:
        return None
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for dynamic, static, target, sigma in data.batches(config.batch_size):
        terms, n = _loss_terms(model(dynamic, static), target, sigma, config.epsilon_loss)
        total += float(terms)
        count += int(n)
    model.train(was_training)
    return total / count if count else None


def _fit(
    state: ModelState,
    train_set: SequenceDataset,
    validation_set: Optional[SequenceDataset],
    config: TrainConfig,
    generator: torch.Generator,
    stage: str,
) -> ModelState:
    if len(train_set) == 0:
        raise ValidationError(f"No training windows for {stage}.")
    model = state.model
    n_updates = min(config.updates_per_epoch, math.ceil(len(train_set) / config.batch_size))
    best_loss, best_state, best_epoch = None, None, None

    for epoch in range(config.epochs):
        model.train()
        losses = []
        for update in range(n_updates):
            lr = lr_schedule(epoch + update / n_updates, config)
            dynamic, static, target, sigma = train_set.batch(train_set.sample_indices(config.batch_size, generator))
            target = add_target_noise(target, config.target_noise_sigma, generator)

            state.optimizer.zero_grad()
            loss = norm_mse_loss(model(dynamic, static, generator), target, sigma, config.epsilon_loss)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"{stage}: non-finite loss at epoch {epoch + 1}, update {update + 1}", state.copy()
                )
            loss.backward()
            try:
                check_gradients(model.named_parameters())
            except NonFiniteError as exc:
                state.optimizer.zero_grad()
                raise TrainingDivergedError(f"{stage}: {exc}", state.copy()) from exc
            clip_gradients([p.grad for p in model.parameters()], config.grad_clip_norm)
            parameters = [p.detach().clone() for p in model.parameters()]
            optimizer_state = copy.deepcopy(state.optimizer.state_dict())
            adam_step(state, lr)
            if not state.is_finite():
                with torch.no_grad():
                    for p, before in zip(model.parameters(), parameters):
                        p.copy_(before)
                state.optimizer.load_state_dict(optimizer_state)
                state.step -= 1
                raise TrainingDivergedError(
                    f"{stage}: non-finite parameters after epoch {epoch + 1}, update {update + 1}", state.copy()
                )
            losses.append(loss.item())

        record = {"stage": stage, "epoch": epoch + 1, "train_loss": float(np.mean(losses)), "lr": lr}
        if (epoch + 1) % config.validation_every == 0 or epoch + 1 == config.epochs:
            val_loss = evaluate_loss(model, validation_set, config)
            record["validation_loss"] = val_loss
            if val_loss is not None and (best_loss is None or val_loss < best_loss):
                best_loss, best_state, best_epoch = val_loss, state.copy(), epoch + 1
            logger.info(
                "%s epoch %d/%d: loss %.5f, lr %.2e, validation loss %s",
                stage, epoch + 1, config.epochs, record["train_loss"], lr, val_loss,
            )
        else:
            logger.info(
                "%s epoch %d/%d: loss %.5f, lr %.2e",
                stage, epoch + 1, config.epochs, record["train_loss"], lr,
            )
        state.history.append(record)

    if best_state is not None:
        logger.info("%s: returning epoch %d with validation loss %.5f", stage, best_epoch, best_loss)
        best_state.history = state.history
        return best_state
    logger.info("%s: no validation windows, returning the final epoch", stage)
    return state


def pretrain(
    train_set: SequenceDataset,
    validation_set: Optional[SequenceDataset],
    model_config: ModelConfig,
    scaler: ScalerStats,
    attribute_names: Sequence[str],
    config: TrainConfig = TrainConfig.pretrain_defaults(),
    seed: int = 0,
) -> ModelState:
    """
    Train a freshly initialised model on reanalysis-driven windows.

    Returns the state with the best validation loss (the last one if no
    validation windows exist).
    """
    if train_set.n_static != model_config.n_static:
        raise ValidationError(
            f"Model expects {model_config.n_static} static inputs, data provides {train_set.n_static}."
        )
    generator = torch.Generator().manual_seed(seed)
    model = StreamflowLSTM(model_config, generator).to(train_set.dtype)
    state = ModelState(model, make_optimizer(model, config), scaler, config, tuple(attribute_names))
    return _fit(state, train_set, validation_set, config, generator, "pretrain")


def finetune(
    state: ModelState,
    train_set: SequenceDataset,
    validation_set: Optional[SequenceDataset],
    config: TrainConfig = TrainConfig.finetune_defaults(),
    seed: int = 0,
) -> ModelState:
    """
    Continue training a pre-trained model on forecast-driven windows.

    The input state is left untouched. All parameters stay trainable, the
    optimizer starts afresh, and the pre-training scaler is reused as is.
    """
    if state.step == 0:
        raise ValidationError("finetune needs a pre-trained state.")
    if train_set.n_static != state.model_config.n_static:
        raise ValidationError("Fine-tuning data does not match the model's static schema.")
    model = copy.deepcopy(state.model)
    tuned = ModelState(
        model, make_optimizer(model, config), state.scaler, config, state.attribute_names, state.step, list(state.history)
    )
    generator = torch.Generator().manual_seed(seed + 1)
    return _fit(tuned, train_set, validation_set, config, generator, "finetune")
