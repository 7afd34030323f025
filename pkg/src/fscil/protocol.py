"""Session state machine: base training, incremental sessions, evaluation."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .amplify import AmplifyConfig, amplify
from .datagen import Benchmark
from .errors import ConfigurationError, ContractViolation, DataError, TrainingDivergenceError
from .losses import LossParts, LossWeights, feature_kd, logit_kd, loss_cls, loss_cls_old, loss_total
from .model import (CosineHead, Extractor, ExtractorConfig, GeometricHead, LRSchedule, base_train,
                    cosine_logits, extract)
from .numerics import Parameter
from .triwe import compose, init_session

# mode -> (heads mixed with phi_all, distillation on, single learning rate)
ABLATION_MODES: dict[str, tuple[str | None, bool, bool]] = {
    "naive": (None, False, True),
    "no-we": (None, True, False),
    "dual-we-old": ("old", True, False),
    "dual-we-base": ("base", True, False),
    "tri-we": ("tri", True, False),
}


class PrototypeBuffer:
    """One mean feature per class; entries are write-once."""

    def __init__(self):
        self.entries: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, c: int) -> bool:
        return c in self.entries

    def add(self, c: int, vec: np.ndarray) -> None:
        if c in self.entries:
            raise ContractViolation(f"prototype for class {c} already stored")
        self.entries[int(c)] = np.array(vec, dtype=np.float64)

    def extend(self, protos: dict[int, np.ndarray]) -> None:
        for c in sorted(protos):
            self.add(c, protos[c])

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        classes = sorted(self.entries)
        if not classes:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return np.stack([self.entries[c] for c in classes]), np.asarray(classes, dtype=np.int64)

    def covers(self, n: int) -> bool:
        return sorted(self.entries) == list(range(n))

    def copy(self) -> "PrototypeBuffer":
        twin = PrototypeBuffer()
        twin.entries = {c: v.copy() for c, v in self.entries.items()}
        return twin


def compute_prototypes(extractor: Extractor, class_sets: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    out = {}
    with nx.no_grad():
        for c, images in class_sets.items():
            if len(images) == 0:
                raise DataError(f"class {c} has no examples")
            out[c] = extract(extractor, images).data.mean(axis=0)
    return out


def _by_class(images: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): images[labels == c] for c in np.unique(labels)}


@dataclass
class BaseConfig:
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    epochs: int = 80
    schedule: LRSchedule = field(default_factory=LRSchedule)
    batch_size: int = 64
    geo_types: int = 4
    geo_weight: float = 1.0
    momentum: float = 0.9


@dataclass
class SessionConfig:
    mode: str = "tri-we"
    amplify: AmplifyConfig = field(default_factory=AmplifyConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr_fast: float = 0.1
    lr_slow: float = 0.001
    naive_lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int | None = None
    alpha_init: float = 1.0
    fixed_alphas: tuple[float, float] | None = None
    kd_feat: bool = True
    kd_logit: bool = True
    cls_old: bool = True
    update_extractor: bool = True

    def __post_init__(self):
        if self.mode not in ABLATION_MODES:
            raise ConfigurationError(f"mode must be one of {list(ABLATION_MODES)}, got {self.mode!r}")
        if min(self.lr_fast, self.lr_slow, self.naive_lr) < 0:
            raise ConfigurationError("learning rates must be non-negative")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")


@dataclass
class SessionState:
    t: int
    n_base: int
    n_prev: int
    n_total: int
    extractor: Extractor
    deployed: CosineHead
    phi0: np.ndarray

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.extractor.state().items()):
            h.update(name.encode())
            h.update(arr.tobytes())
        h.update(self.deployed.weight.tobytes())
        h.update(self.phi0.tobytes())
        return h.hexdigest()


@dataclass
class SessionMetrics:
    session: int
    n_classes: int
    acc: float
    base_acc: float
    new_acc: float
    hm: float


@dataclass
class MetricsReport:
    sessions: list[SessionMetrics] = field(default_factory=list)
    alphas: list[tuple[float, float] | None] = field(default_factory=list)
    buffer_sizes: list[int] = field(default_factory=list)

    @property
    def avg_acc(self) -> float:
        return float(np.mean([s.acc for s in self.sessions])) if self.sessions else 0.0

    @property
    def base_drop(self) -> float:
        return self.sessions[0].base_acc - self.sessions[-1].base_acc


def harmonic_mean(a: float, b: float) -> float:
    return 2.0 * a * b / (a + b) if a > 0 and b > 0 else 0.0


def evaluate(extractor: Extractor, head: CosineHead, images: np.ndarray, labels: np.ndarray,
             n_base: int, n_total: int, session: int = 0, batch: int = 1024) -> SessionMetrics:
    """Top-1 over queries of classes < n_total; ties go to the lowest class index."""
    labels = np.asarray(labels)
    mask = labels < n_total
    if not mask.any():
        raise DataError("no query examples for the seen classes")
    if labels.min() < 0:
        raise DataError("negative query label")
    if head.n_classes < n_total:
        raise ConfigurationError(f"head has {head.n_classes} classes, need {n_total}")
    x, y = images[mask], labels[mask]
    preds = np.empty(len(y), dtype=np.int64)
    with nx.no_grad():
        for i in range(0, len(y), batch):
            logits = head.logits(extract(extractor, x[i:i + batch])).data[:, :n_total]
            preds[i:i + batch] = np.argmax(logits, axis=1)
    hit = preds == y
    base = y < n_base
    base_acc = float(hit[base].mean()) if base.any() else 0.0
    new_acc = float(hit[~base].mean()) if (~base).any() else 0.0
    return SessionMetrics(session, n_total, float(hit.mean()), base_acc, new_acc, harmonic_mean(base_acc, new_acc))


def run_base_session(bench: Benchmark, cfg: BaseConfig, seed: int, scale: float = 16.0
                     ) -> tuple[SessionState, PrototypeBuffer]:
    ext_cfg = copy.deepcopy(cfg.extractor)
    h, w, c = bench.image_shape
    if (ext_cfg.input_height, ext_cfg.input_width, ext_cfg.input_channels) != (h, w, c):
        raise ConfigurationError(f"extractor input {ext_cfg.input_shape} does not match images {(h, w, c)}")
    extractor = Extractor(ext_cfg, seed=[seed, 1])
    d = ext_cfg.feature_dim
    head = Parameter("head.phi", np.random.default_rng([seed, 2]).normal(0.0, 1.0, size=(d, bench.n_base)))
    geo = GeometricHead(d, cfg.geo_types, seed=[seed, 3])
    base_train(extractor, head, geo, bench.base_images, bench.base_labels, cfg.epochs, cfg.schedule,
               seed=[seed, 4], scale=scale, batch_size=cfg.batch_size, momentum=cfg.momentum,
               min_per_class=bench.k_shot, geo_weight=cfg.geo_weight)
    for p in extractor.params():
        p.velocity = np.zeros_like(p.data)
    buffer = PrototypeBuffer()
    buffer.extend(compute_prototypes(extractor, _by_class(bench.base_images, bench.base_labels)))
    # unit columns put phi_0 on the same footing as the unit-norm NCM columns added later
    phi0 = head.data / np.linalg.norm(head.data, axis=0, keepdims=True)
    state = SessionState(0, bench.n_base, bench.n_base, bench.n_base, extractor, CosineHead(phi0, scale), phi0.copy())
    return state, buffer


def run_incremental_session(state: SessionState, images: np.ndarray, labels: np.ndarray,
                            buffer: PrototypeBuffer, cfg: SessionConfig, seed: int
                            ) -> tuple[SessionState, PrototypeBuffer, tuple[float, float] | None]:
    """Train one N-way K-shot session; returns (state, buffer, learned alphas)."""
    ensemble, use_kd, uniform_lr = ABLATION_MODES[cfg.mode]
    t = state.t + 1
    n_prev = state.n_total
    new_classes = np.unique(labels)
    n_total = n_prev + len(new_classes)
    if not np.array_equal(new_classes, np.arange(n_prev, n_total)):
        raise DataError(f"session {t} labels must be exactly classes {n_prev}..{n_total - 1}")
    if not buffer.covers(n_prev):
        raise DataError(f"buffer must hold classes 0..{n_prev - 1} at the start of session {t}")
    scale = state.deployed.scale
    before = state.fingerprint()

    teacher = state.extractor
    student = teacher.clone()
    student.set_group("slow" if cfg.update_extractor else "frozen")
    protos, proto_labels = buffer.arrays()

    new_feats = np.stack([v for _, v in sorted(compute_prototypes(student, _by_class(images, labels)).items())], 1)
    norms = np.linalg.norm(new_feats, axis=0, keepdims=True)
    if np.any(norms == 0):
        raise DataError("a new class has a zero mean feature")
    new_feats = new_feats / norms

    head = None
    if ensemble is None:
        phi_all = Parameter("head.phi_all", np.concatenate([state.deployed.weight, new_feats], 1), group="fast")
        head_params = [phi_all]
    else:
        head = init_session(state.deployed.weight, state.phi0, new_feats, t, alpha_init=cfg.alpha_init,
                            components=ensemble, fixed_alphas=cfg.fixed_alphas)
        head_params = head.params()
    params = student.params() + head_params
    lr_fast, lr_slow = (cfg.naive_lr, cfg.naive_lr) if uniform_lr else (cfg.lr_fast, cfg.lr_slow)

    amp = teacher_feats = teacher_probs = None
    if use_kd and (cfg.kd_feat or cfg.kd_logit) and cfg.weights.gamma2 > 0 and cfg.epochs > 0:
        amp_seed = int(np.random.SeedSequence([seed, t, cfg.amplify.seed]).generate_state(1)[0])
        amp = amplify(images, AmplifyConfig(cfg.amplify.scheme, cfg.amplify.factor, cfg.amplify.beta_a, amp_seed))
        with nx.no_grad():
            teacher_feats = extract(teacher, amp).data
            teacher_probs = nx.softmax(cosine_logits(state.deployed.weight, teacher_feats, scale)).data
    use_old = head is not None and ensemble in ("tri", "old") and cfg.cls_old and cfg.weights.gamma1 > 0

    n = len(labels)
    bs = cfg.batch_size or n
    rng = np.random.default_rng([seed, t, 7])
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            phi = compose(head) if head is not None else phi_all
            parts = LossParts(loss_cls(phi, extract(student, images[idx]), labels[idx], protos, proto_labels, scale))
            if use_old:
                parts.cls_old = loss_cls_old(head.phi_old, protos, proto_labels, scale)
            if amp is not None:
                s_amp = extract(student, amp)
                if cfg.kd_feat:
                    parts.feat = feature_kd(s_amp, teacher_feats)
                if cfg.kd_logit:
                    parts.logit = logit_kd(teacher_probs, s_amp, phi, n_prev, scale)
            loss = loss_total(parts, cfg.weights)
            if not np.isfinite(loss.data):
                raise TrainingDivergenceError("non-finite loss", step)
            nx.backward(loss)
            nx.sgd_step(params, lr_fast, lr_slow, cfg.momentum)
            step += 1

    buffer.extend(compute_prototypes(student, _by_class(images, labels)))
    if len(buffer) != n_total:
        raise ContractViolation(f"buffer holds {len(buffer)} prototypes after session {t}, expected {n_total}")
    if state.fingerprint() != before:
        raise ContractViolation(f"teacher snapshot changed during session {t}")

    with nx.no_grad():
        weight = (compose(head) if head is not None else phi_all).data.copy()
    for p in student.params():
        p.velocity = np.zeros_like(p.data)
    new_state = SessionState(t, state.n_base, n_prev, n_total, student, CosineHead(weight, scale), state.phi0)
    return new_state, buffer, head.alpha_values() if head is not None else None


def check_disjoint(bench: Benchmark) -> None:
    """Session class sets must not overlap."""
    bench.validate()


def run_benchmark(bench: Benchmark, base: BaseConfig, session: SessionConfig, seed: int,
                  base_result: tuple[SessionState, PrototypeBuffer] | None = None,
                  scale: float = 16.0) -> tuple[MetricsReport, SessionState]:
    """Base session then every incremental session, evaluating after each."""
    check_disjoint(bench)
    if base_result is None:
        state, buffer = run_base_session(bench, base, seed, scale)
    else:
        state, buffer = copy.deepcopy(base_result[0]), base_result[1].copy()
    report = MetricsReport()
    report.sessions.append(evaluate(state.extractor, state.deployed, bench.query_images, bench.query_labels,
                                    bench.n_base, state.n_total, 0))
    report.alphas.append(None)
    report.buffer_sizes.append(len(buffer))
    for t in range(1, bench.sessions + 1):
        state, buffer, alphas = run_incremental_session(state, bench.session_images[t - 1],
                                                        bench.session_labels[t - 1], buffer, session, seed)
        if len(buffer) != bench.n_seen(t):
            raise ContractViolation(f"buffer size {len(buffer)} != N_t={bench.n_seen(t)}")
        report.sessions.append(evaluate(state.extractor, state.deployed, bench.query_images, bench.query_labels,
                                        bench.n_base, state.n_total, t))
        report.alphas.append(alphas)
        report.buffer_sizes.append(len(buffer))
    return report, state
