"""Synthetic layers and calibration activations for tests and demos."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_store import TensorBundle


def random_orthogonal(rng: np.random.Generator, m: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.normal(size=(m, m)))
    return Q * np.sign(np.diag(R))


def correlated_activations(rng: np.random.Generator, rows: int, m: int, cond: float = 1e3) -> np.ndarray:
    """``X = G C`` with Gaussian ``G`` and a mixing ``C`` of condition number ``cond``.

    ``C`` has log-spaced singular values between 1 and ``1/cond`` and random
    orthogonal singular vectors, so the features are strongly correlated.
    """
    G = rng.normal(size=(rows, m))
    s = np.logspace(0.0, -np.log10(cond), m)
    C = (random_orthogonal(rng, m) * s) @ random_orthogonal(rng, m).T
    return G @ C


@dataclass
class SyntheticLayer:
    W: np.ndarray
    X: np.ndarray

    @property
    def gram(self) -> np.ndarray:
        return self.X.T @ self.X


def layer_suite(seed: int, count: int = 50, m_range=(8, 16), n_range=(8, 16), rows_per_feature: int = 8,
                cond: float = 1e3) -> list[SyntheticLayer]:
    """``count`` layers with Gaussian weights and correlated activations.

    Dimensions are drawn uniformly from the inclusive ranges.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(count):
        m = int(rng.integers(m_range[0], m_range[1] + 1))
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        X = correlated_activations(rng, rows_per_feature * m, m, cond)
        layers.append(SyntheticLayer(W=rng.normal(size=(m, n)), X=X))
    return layers


def suite_bundle(layers: list[SyntheticLayer], use_gram: bool = False) -> TensorBundle:
    """Pack layers as ``layerNN/W`` plus ``layerNN/acts`` (or ``/gram``), float32."""
    bundle = TensorBundle(metadata={"source": "synthetic"})
    for i, layer in enumerate(layers):
        name = f"layer{i:02d}"
        bundle.add(f"{name}/W", layer.W.astype(np.float32))
        if use_gram:
            bundle.add(f"{name}/gram", layer.gram.astype(np.float32))
        else:
            bundle.add(f"{name}/acts", layer.X.astype(np.float32))
    return bundle
