"""Weight-space ensemble of three cosine heads with learnable mixing scalars.

The deployed head of session t mixes, column by column,

* base classes:       a1*phi0 + a2*phi_old + a3*phi_all
* previous sessions:  a4*phi_old + a5*phi_all
* new classes:        phi_all

where (a1..a5) come from two non-negative scalars via :func:`normalize_alphas`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, ContractViolation
from .model import CosineHead
from .numerics import Parameter, Tensor

COMPONENTS = ("tri", "old", "base")


def softplus_inverse(y: float) -> float:
    if y <= 0:
        raise ContractViolation("softplus can only reach positive values")
    return math.log(math.expm1(y))


def normalize_alphas(alpha1, alpha2) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    """Map (alpha1, alpha2) >= 0 to the five mixing coefficients.

    The first three sum to one and so do the last two. Accepts floats or
    scalar tensors; gradients flow back into tensor inputs.
    """
    a1, a2 = nx.as_tensor(alpha1), nx.as_tensor(alpha2)
    if a1.data < 0 or a2.data < 0 or not (np.isfinite(a1.data) and np.isfinite(a2.data)):
        raise ContractViolation(f"alphas must be finite and non-negative, got ({a1.data}, {a2.data})")
    denom3 = nx.add(nx.add(a1, a2), 1.0)
    denom2 = nx.add(a2, 1.0)
    return (
        nx.div(a1, denom3),
        nx.div(a2, denom3),
        nx.div(1.0, denom3),
        nx.div(a2, denom2),
        nx.div(1.0, denom2),
    )


@dataclass
class TriWEHead:
    phi0: Parameter
    phi_old: Parameter
    phi_all: Parameter
    alpha1: Parameter  # raw, mapped through softplus
    alpha2: Parameter
    n_base: int
    n_prev: int
    n_total: int
    alpha1_fixed: float | None = None
    alpha2_fixed: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.n_base <= self.n_prev <= self.n_total:
            raise ConfigurationError(
                f"class counts must satisfy 1 <= N0 <= N_prev <= N_t, got {self.n_base}, {self.n_prev}, {self.n_total}")
        d = self.phi_all.shape[0]
        for name, p, n in (("phi0", self.phi0, self.n_base), ("phi_old", self.phi_old, self.n_prev),
                           ("phi_all", self.phi_all, self.n_total)):
            if p.data.ndim != 2 or p.shape != (d, n):
                raise ConfigurationError(f"{name} has shape {p.shape}, expected {(d, n)}")

    def _alpha(self, raw: Parameter, fixed: float | None) -> Tensor:
        if fixed is not None:
            return Tensor(fixed)
        return nx.softplus(raw)

    def alphas(self) -> tuple[Tensor, Tensor]:
        return self._alpha(self.alpha1, self.alpha1_fixed), self._alpha(self.alpha2, self.alpha2_fixed)

    def alpha_values(self) -> tuple[float, float]:
        a1, a2 = self.alphas()
        return float(a1.data), float(a2.data)

    def params(self) -> list[Parameter]:
        return [self.phi0, self.phi_old, self.phi_all, self.alpha1, self.alpha2]


def compose(head: TriWEHead) -> Tensor:
    """Assemble the d x N_t deployed weight on the autodiff graph."""
    a1, a2, a3, a4, a5 = normalize_alphas(*head.alphas())
    n0, nprev, nt = head.n_base, head.n_prev, head.n_total
    base = nx.add(
        nx.add(nx.mul(a1, head.phi0), nx.mul(a2, nx.columns(head.phi_old, 0, n0))),
        nx.mul(a3, nx.columns(head.phi_all, 0, n0)),
    )
    blocks = [base]
    if nprev > n0:
        blocks.append(nx.add(nx.mul(a4, nx.columns(head.phi_old, n0, nprev)),
                             nx.mul(a5, nx.columns(head.phi_all, n0, nprev))))
    if nt > nprev:
        blocks.append(nx.columns(head.phi_all, nprev, nt))
    return nx.concat(blocks, axis=1) if len(blocks) > 1 else blocks[0]


def init_session(
    prev_deployed_phi: np.ndarray,
    phi0: np.ndarray,
    new_class_features: np.ndarray,
    t: int,
    *,
    alpha_init: float = 1.0,
    components: str = "tri",
    fixed_alphas: tuple[float, float] | None = None,
) -> TriWEHead:
    """Build the session-t ensemble from the previously deployed head.

    ``components`` selects which heads join phi_all: ``tri`` (phi0 and
    phi_old), ``old`` (phi_old only) or ``base`` (phi0 only); a dropped head
    has its scalar pinned at 0. In ``tri`` mode alpha2 is pinned at 0 for
    t == 1, where phi_old and phi0 coincide. ``fixed_alphas`` pins both.
    """
    if components not in COMPONENTS:
        raise ConfigurationError(f"components must be one of {COMPONENTS}, got {components!r}")
    if t < 1:
        raise ConfigurationError("incremental sessions start at t = 1")
    prev = np.array(prev_deployed_phi, dtype=np.float64)
    phi0 = np.array(phi0, dtype=np.float64)
    new = np.array(new_class_features, dtype=np.float64)
    if prev.ndim != 2 or phi0.ndim != 2 or new.ndim != 2:
        raise ConfigurationError("head weights and new-class features must be matrices")
    d = prev.shape[0]
    if phi0.shape[0] != d or new.shape[0] != d:
        raise ConfigurationError(f"dimension mismatch: prev {prev.shape}, phi0 {phi0.shape}, new {new.shape}")
    n_base, n_prev, n_new = phi0.shape[1], prev.shape[1], new.shape[1]

    a1_fixed: float | None = None
    a2_fixed: float | None = None
    if components == "old":
        a1_fixed = 0.0
    elif components == "base":
        a2_fixed = 0.0
    elif t == 1:
        a2_fixed = 0.0
    if fixed_alphas is not None:
        a1_fixed, a2_fixed = float(fixed_alphas[0]), float(fixed_alphas[1])

    raw = softplus_inverse(alpha_init) if alpha_init > 0 else -30.0
    return TriWEHead(
        phi0=Parameter("head.phi0", phi0.copy(), group="frozen"),
        phi_old=Parameter("head.phi_old", prev.copy(), group="slow"),
        phi_all=Parameter("head.phi_all", np.concatenate([prev, new], axis=1), group="fast"),
        alpha1=Parameter("head.alpha1", raw, group="frozen" if a1_fixed is not None else "slow"),
        alpha2=Parameter("head.alpha2", raw, group="frozen" if a2_fixed is not None else "slow"),
        n_base=n_base,
        n_prev=n_prev,
        n_total=n_prev + n_new,
        alpha1_fixed=a1_fixed,
        alpha2_fixed=a2_fixed,
    )


def deploy(head: TriWEHead, scale: float = 16.0) -> CosineHead:
    """Detached plain cosine head carrying the composed weight."""
    with nx.no_grad():
        w = compose(head).data.copy()
    return CosineHead(w, scale)
