"""Lipschitz-constrained GroupSort networks, monotone by construction.

A MonotoneNetwork computes

    out_k(x) = g_k(x) + lipschitz * sign_k * sum_{j in S} x_j

where ``g`` is a GroupSort network whose weights are normalized so that
``|g(x) - g(y)|_inf <= lipschitz * |x - y|_1``. Every partial derivative of
``g`` is therefore bounded by ``lipschitz`` in magnitude, and the residual
term makes ``out_k`` non-decreasing (sign +1) or non-increasing (sign -1) in
every feature of S. Outputs with sign 0 are plain Lipschitz outputs.

Weights are re-normalized after every optimizer step (``project``), so the
constraint holds throughout training, not only at the end.
"""

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError
from .nn_core import GROUPSORT, DenseNetwork, ForwardTrace


@dataclass
class MonotoneNetwork:
    base: DenseNetwork
    lipschitz: float = 1.0
    monotone_features: List[int] = field(default_factory=lambda: [0])
    output_signs: List[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.lipschitz > 0:
            raise ConfigurationError(f"Lipschitz constant must be > 0, got {self.lipschitz}")
        self.monotone_features = sorted(int(j) for j in self.monotone_features)
        for j in self.monotone_features:
            if not 0 <= j < self.base.in_dim:
                raise ConfigurationError(f"Monotone feature {j} outside input width {self.base.in_dim}")
        if not self.output_signs:
            self.output_signs = [1] * self.base.out_dim
        if len(self.output_signs) != self.base.out_dim or any(s not in (-1, 0, 1) for s in self.output_signs):
            raise ConfigurationError(f"output_signs must hold -1/0/+1 per output, got {self.output_signs}")
        self._signs = np.asarray(self.output_signs, dtype=float)

    @classmethod
    def initialize(cls, dims: Sequence[int], rng: np.random.Generator, lipschitz: float = 1.0,
                   monotone_features: Sequence[int] = (0,), output_signs: Sequence[int] = (),
                   output_activations=None, group_size: int = 2) -> "MonotoneNetwork":
        base = DenseNetwork.initialize(dims, rng, GROUPSORT, output_activations, group_size)
        net = cls(base, lipschitz, list(monotone_features), list(output_signs))
        return net.normalize_weights()

    @property
    def in_dim(self) -> int:
        return self.base.in_dim

    @property
    def out_dim(self) -> int:
        return self.base.out_dim

    def normalize_weights(self) -> "MonotoneNetwork":
        """Scale every weight column by 1/max(1, lipschitz^(-1/D) * column L1 norm), in place."""
        depth = len(self.base.weights)
        per_layer = self.lipschitz ** (-1.0 / depth)
        for w in self.base.weights:
            col_norms = np.abs(w).sum(axis=0)
            w /= np.maximum(1.0, per_layer * col_norms)[None, :]
        return self

    def lipschitz_bound(self) -> float:
        """Product of the per-layer max column L1 norms."""
        return float(np.prod([np.abs(w).sum(axis=0).max() for w in self.base.weights]))

    def _residual(self, x: np.ndarray) -> np.ndarray:
        if not self.monotone_features:
            return np.zeros((x.shape[0], self.out_dim))
        total = x[:, self.monotone_features].sum(axis=1)
        return self.lipschitz * total[:, None] * self._signs[None, :]

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        batch = x[None, :] if squeeze else x
        out = self.base.forward(batch) + self._residual(batch)
        return out[0] if squeeze else out

    def forward_trace(self, x) -> Tuple[np.ndarray, ForwardTrace]:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        batch = x[None, :] if squeeze else x
        out, trace = self.base.forward_trace(batch)
        out = out + self._residual(batch)
        trace.squeeze = squeeze
        return (out[0] if squeeze else out), trace

    def backward(self, trace: ForwardTrace, upstream) -> Tuple[List[np.ndarray], np.ndarray]:
        grads, d_input = self.base.backward(trace, upstream)
        up = np.asarray(upstream, dtype=float)
        if up.ndim == 1:
            up = up[None, :]
        d_input = np.array(d_input, dtype=float, ndmin=2)
        if self.monotone_features:
            d_input[:, self.monotone_features] += self.lipschitz * (up @ self._signs)[:, None]
        return grads, (d_input[0] if trace.squeeze else d_input)

    def parameters(self) -> List[np.ndarray]:
        return self.base.parameters()

    def project(self):
        self.normalize_weights()

    def to_dict(self) -> dict:
        return {
            "type": "monotone",
            "lipschitz": self.lipschitz,
            "monotone_features": list(self.monotone_features),
            "output_signs": list(self.output_signs),
            "base": self.base.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MonotoneNetwork":
        return cls(DenseNetwork.from_dict(data["base"]), float(data["lipschitz"]),
                   list(data["monotone_features"]), list(data["output_signs"]))


def normalize_weights(net: MonotoneNetwork) -> MonotoneNetwork:
    return net.normalize_weights()


def monotone_forward(net: MonotoneNetwork, x) -> float:
    """Scalar output of a single-output monotone network for one input vector."""
    if net.out_dim != 1:
        raise ConfigurationError(f"monotone_forward expects a single-output network, got {net.out_dim} outputs")
    return float(net.forward(np.asarray(x, dtype=float))[0])


def network_from_dict(data: dict):
    """Rebuild a dense or monotone network from its serialized form."""
    kind = data.get("type")
    if kind == "dense":
        return DenseNetwork.from_dict(data)
    if kind == "monotone":
        return MonotoneNetwork.from_dict(data)
    raise ConfigurationError(f"Unknown network type: {kind}")
