"""Feature extractor, cosine classification head and base-session training."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, ContractViolation, DataError, DegenerateInputError, TrainingDivergenceError
from .numerics import Parameter, Tensor


@dataclass
class ExtractorConfig:
    input_height: int = 8
    input_width: int = 8
    input_channels: int = 1
    kind: str = "mlp"
    hidden_widths: list[int] = field(default_factory=lambda: [128, 64])
    feature_dim: int = 32

    def validate(self) -> None:
        if self.kind not in ("mlp", "conv-small"):
            raise ConfigurationError(f"kind must be 'mlp' or 'conv-small', got {self.kind!r}")
        if self.feature_dim < 2:
            raise ConfigurationError("feature_dim must be at least 2")
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise ConfigurationError("need at least one positive hidden width")
        if min(self.input_height, self.input_width, self.input_channels) < 1:
            raise ConfigurationError("input dimensions must be positive")
        if self.kind == "conv-small":
            k = 2 ** len(self.hidden_widths)
            if self.input_height % k or self.input_width % k:
                raise ConfigurationError(
                    f"conv-small with {len(self.hidden_widths)} blocks needs H, W divisible by {k}")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.input_height, self.input_width, self.input_channels)


class Extractor:
    """g_theta: images (B, H, W, C) -> raw features (B, d)."""

    def __init__(self, config: ExtractorConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.layers: list[tuple[Parameter, Parameter]] = []
        H, W, C = config.input_shape
        if config.kind == "mlp":
            fan_in = H * W * C
            for i, width in enumerate(config.hidden_widths):
                self.layers.append(self._dense(rng, f"theta.fc{i}", fan_in, width))
                fan_in = width
        else:
            cin = C
            for i, width in enumerate(config.hidden_widths):
                w = rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), size=(3, 3, cin, width))
                self.layers.append((Parameter(f"theta.conv{i}.w", w), Parameter(f"theta.conv{i}.b", np.zeros(width))))
                cin = width
                H, W = H // 2, W // 2
            fan_in = H * W * cin
        self.proj = self._dense(rng, "theta.proj", fan_in, config.feature_dim)

    @staticmethod
    def _dense(rng, name, fan_in, fan_out):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        return Parameter(f"{name}.w", w), Parameter(f"{name}.b", np.zeros(fan_out))

    def params(self) -> list[Parameter]:
        out = [p for layer in self.layers for p in layer]
        return out + list(self.proj)

    def set_group(self, group: str) -> None:
        for p in self.params():
            p.group = group

    def clone(self) -> "Extractor":
        """Independent deep copy (fresh velocities and grads)."""
        twin = copy.deepcopy(self)
        for p in twin.params():
            p.zero_grad()
            p.velocity = np.zeros_like(p.data)
        return twin

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params():
            if state[p.name].shape != p.shape:
                raise ConfigurationError(f"{p.name}: shape {state[p.name].shape} != {p.shape}")
            p.data = np.array(state[p.name], dtype=np.float64)

    def __call__(self, images) -> Tensor:
        return extract(self, images)


def extract(extractor: Extractor, images) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(images)
    cfg = extractor.config
    if x.data.ndim != 4 or x.shape[1:] != cfg.input_shape:
        raise ConfigurationError(f"expected images (B, {cfg.input_shape}), got {x.shape}")
    B = x.shape[0]
    if cfg.kind == "mlp":
        h = nx.reshape(x, (B, -1))
        for w, b in extractor.layers:
            h = nx.relu(nx.add(nx.matmul(h, w), b))
    else:
        h = x
        for w, b in extractor.layers:
            h = nx.meanpool(nx.relu(nx.add(nx.conv2d(h, w), b)))
        h = nx.reshape(h, (B, -1))
    w, b = extractor.proj
    return nx.add(nx.matmul(h, w), b)


@dataclass
class CosineHead:
    """Columns of ``weight`` (d x N) are class vectors; logits are scaled cosines."""

    weight: np.ndarray
    scale: float = 16.0

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        if self.weight.ndim != 2 or self.weight.shape[1] < 1:
            raise ConfigurationError(f"head weight must be d x N with N >= 1, got {self.weight.shape}")
        if np.any(np.linalg.norm(self.weight, axis=0) == 0):
            raise DegenerateInputError("cosine head has a zero column")
        if self.scale <= 0:
            raise ConfigurationError("cosine scale must be positive")

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def logits(self, features) -> Tensor:
        return cosine_logits(self.weight, features, self.scale)


def cosine_logits(weight, features, scale: float) -> Tensor:
    """logit[b, n] = s * <phi_n / |phi_n|, f_b / |f_b|>."""
    w = nx.as_tensor(weight)
    f = nx.as_tensor(features)
    if f.data.ndim != 2 or w.data.ndim != 2 or f.shape[1] != w.shape[0]:
        raise ConfigurationError(f"cosine_logits: features {f.shape} vs weight {w.shape}")
    return nx.scale(nx.matmul(nx.l2_normalize(f, axis=1), nx.l2_normalize(w, axis=0)), scale)


class GeometricHead:
    """Linear head predicting which of ``n_types`` rotations was applied."""

    def __init__(self, feature_dim: int, n_types: int = 4, seed: int = 0):
        if n_types < 2:
            raise ConfigurationError("need at least two geometric transform types")
        rng = np.random.default_rng(seed)
        self.n_types = n_types
        self.weight = Parameter("geo.w", rng.normal(0.0, np.sqrt(1.0 / feature_dim), size=(feature_dim, n_types)))

    def logits(self, features) -> Tensor:
        return nx.matmul(features, self.weight)


def geometric_transform(image: np.ndarray, b: int, n_types: int = 4) -> np.ndarray:
    """Rotate an (H, W, C) image by b * 360/n_types degrees (n_types in {2, 4})."""
    if not 0 <= b < n_types:
        raise ContractViolation(f"transform index {b} outside [0, {n_types})")
    if n_types not in (2, 4):
        raise ConfigurationError("only 2 (0/180) or 4 (0/90/180/270) rotation types are supported")
    k = b * (4 // n_types)
    if k % 2 and image.shape[0] != image.shape[1]:
        raise ConfigurationError("90-degree rotations need square images")
    return np.rot90(image, k=k, axes=(0, 1)).copy()


def _rotate_batch(images: np.ndarray, b: int, n_types: int) -> np.ndarray:
    k = b * (4 // n_types)
    return np.rot90(images, k=k, axes=(1, 2))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean CE of row-wise softmax(logits) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n_cls = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise DataError(f"label out of range [0, {n_cls})")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = nx.sum(nx.mul(nx.log_softmax(logits), onehot), axis=1)
    return nx.scale(nx.mean(picked), -1.0)


@dataclass
class LRSchedule:
    """Step decay: ``base_lr * gamma ** (number of milestones <= epoch)``."""

    base_lr: float = 0.01
    milestones: tuple[int, ...] = (60, 70)
    gamma: float = 0.1

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.gamma ** sum(1 for m in self.milestones if epoch >= m)


def base_train(
    extractor: Extractor,
    head: Parameter,
    geo_head: GeometricHead,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    schedule: LRSchedule,
    seed: int,
    *,
    scale: float = 16.0,
    batch_size: int = 64,
    momentum: float = 0.9,
    min_per_class: int = 1,
    geo_weight: float = 1.0,
) -> tuple[Extractor, Parameter]:
    """Train (theta, phi_0) with CE on cosine logits plus rotation-prediction CE.

    ``extractor`` and ``head`` are updated in place and returned; the geometric
    head is only an auxiliary and is left to the caller to drop.
    """
    n_base = head.shape[1]
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_base)
    if counts.size > n_base or np.any(counts[:n_base] < min_per_class):
        raise DataError(f"base set must cover classes 0..{n_base - 1} with >= {min_per_class} examples each")
    n_types = geo_head.n_types
    if n_types == 4 and images.shape[1] != images.shape[2]:
        raise ConfigurationError("90-degree rotations need square images; use 2 transform types")
    rng = np.random.default_rng(seed)
    params = extractor.params() + [head, geo_head.weight]
    n = len(labels)
    for epoch in range(epochs):
        lr = schedule.lr_at(epoch)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x, y = images[idx], labels[idx]
            stacked = np.concatenate([_rotate_batch(x, b, n_types) for b in range(n_types)])
            feats = extract(extractor, stacked)
            main = cross_entropy(cosine_logits(head, nx.rows(feats, 0, len(idx)), scale), y)
            geo_labels = np.repeat(np.arange(n_types), len(idx))
            loss = nx.add(main, nx.scale(cross_entropy(geo_head.logits(feats), geo_labels), geo_weight))
            if not np.isfinite(loss.data):
                raise TrainingDivergenceError("base training diverged", epoch)
            nx.backward(loss)
            nx.sgd_step(params, lr, lr, momentum)
    return extractor, head
