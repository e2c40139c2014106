"""Kolmogorov-Arnold network layers with hand-written reverse-mode gradients.

Two edge-function families are provided:

* :class:`SplineLayer` -- a SiLU base path plus a B-spline path on a uniform
  extended grid (the Efficient-KAN formulation),
* :class:`WaveletLayer` -- Mexican-hat wavelets with learnable weight,
  translation and log-scale per edge (the Wav-KAN formulation).

Layers operate on batches: inputs are ``(batch, in_dim)`` arrays.  Each layer's
``forward`` returns the output together with a cache consumed by
``backward``, which returns parameter gradients and the input gradient.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "SplineGrid",
    "SplineLayer",
    "WaveletLayer",
    "KanNetwork",
    "bspline_basis",
    "bspline_basis_with_derivative",
    "silu",
    "mexican_hat",
    "init_network",
    "network_forward",
    "network_gradients",
    "parse_architecture",
    "save_network",
    "load_network",
    "CheckpointError",
]

FORMAT_VERSION = 1
MEXICAN_HAT_NORM = 2.0 / (math.sqrt(3.0) * math.pi**0.25)


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class SplineGrid:
    grid_size: int = 5
    order: int = 3
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.grid_size < 1 or self.order < 0:
            raise ValueError("grid_size must be >= 1 and order >= 0")
        if not self.hi > self.lo:
            raise ValueError("grid domain must satisfy hi > lo")

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / self.grid_size

    @property
    def n_basis(self) -> int:
        return self.grid_size + self.order

    @property
    def knots(self) -> np.ndarray:
        k = self.order
        return self.lo + self.spacing * np.arange(-k, self.grid_size + k + 1)

    def to_dict(self) -> dict:
        return {"G": self.grid_size, "k": self.order, "domain": [self.lo, self.hi]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplineGrid":
        return cls(int(d["G"]), int(d["k"]), float(d["domain"][0]), float(d["domain"][1]))


def _cox_de_boor(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    x = x[..., None]
    basis = ((x >= knots[:-1]) & (x < knots[1:])).astype(float)
    for p in range(1, degree + 1):
        left = (x - knots[: -p - 1]) / (knots[p:-1] - knots[: -p - 1])
        right = (knots[p + 1 :] - x) / (knots[p + 1 :] - knots[1:-p])
        basis = left * basis[..., :-1] + right * basis[..., 1:]
    return basis


def bspline_basis(x, grid: SplineGrid) -> np.ndarray:
    """All ``G + k`` B-spline basis values at ``x`` (any shape); appends a trailing axis."""
    return _cox_de_boor(np.asarray(x, dtype=float), grid.knots, grid.order)


def bspline_basis_with_derivative(x, grid: SplineGrid) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    knots = grid.knots
    k = grid.order
    if k == 0:
        b = _cox_de_boor(x, knots, 0)
        return b, np.zeros_like(b)
    lower = _cox_de_boor(x, knots, k - 1)
    upper = (x[..., None] - knots[: -k - 1]) / (knots[k:-1] - knots[: -k - 1]) * lower[..., :-1] + (
        knots[k + 1 :] - x[..., None]
    ) / (knots[k + 1 :] - knots[1:-k]) * lower[..., 1:]
    # Uniform knots: B'_{m,k} = (B_{m,k-1} - B_{m+1,k-1}) / h
    deriv = (lower[..., :-1] - lower[..., 1:]) / grid.spacing
    return upper, deriv


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def mexican_hat(u):
    u2 = u * u
    return MEXICAN_HAT_NORM * (1.0 - u2) * np.exp(-0.5 * u2)


def _mexican_hat_grad(u):
    u2 = u * u
    return MEXICAN_HAT_NORM * u * (u2 - 3.0) * np.exp(-0.5 * u2)


def _check_input(x: np.ndarray, in_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ValueError(f"expected input of shape (batch, {in_dim}), got {x.shape}")
    return x


@dataclass
class SplineLayer:
    """out_i = sum_j base_weights[i,j] silu(x_j) + sum_m spline_coeffs[i,j,m] B_m(x_j)."""

    base_weights: np.ndarray
    spline_coeffs: np.ndarray
    grid: SplineGrid = field(default_factory=SplineGrid)

    kind = "spline"
    param_names = ("base_weights", "spline_coeffs")

    def __post_init__(self):
        out_dim, in_dim = self.base_weights.shape
        if self.spline_coeffs.shape != (out_dim, in_dim, self.grid.n_basis):
            raise ValueError(
                f"spline_coeffs shape {self.spline_coeffs.shape} != {(out_dim, in_dim, self.grid.n_basis)}"
            )

    @property
    def in_dim(self) -> int:
        return self.base_weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.base_weights.shape[0]

    def features(self, x: np.ndarray):
        """Input-only quantities: silu(x), silu'(x), basis, basis derivative."""
        basis, dbasis = bspline_basis_with_derivative(x, self.grid)
        return silu(x), _silu_grad(x), basis, dbasis

    def forward(self, x, feats=None):
        x = _check_input(x, self.in_dim)
        if feats is None:
            feats = self.features(x)
        s, _, basis, _ = feats
        flat = basis.reshape(len(x), -1)
        y = s @ self.base_weights.T + flat @ self.spline_coeffs.reshape(self.out_dim, -1).T
        return y, feats

    def backward(self, cache, grad_out, need_input_grad=True):
        s, ds, basis, dbasis = cache
        flat = basis.reshape(len(grad_out), -1)
        grads = {
            "base_weights": grad_out.T @ s,
            "spline_coeffs": (grad_out.T @ flat).reshape(self.spline_coeffs.shape),
        }
        if not need_input_grad:
            return grads, None
        g_basis = (grad_out @ self.spline_coeffs.reshape(self.out_dim, -1)).reshape(basis.shape)
        dx = (grad_out @ self.base_weights) * ds + np.einsum("bim,bim->bi", g_basis, dbasis)
        return grads, dx


@dataclass
class WaveletLayer:
    """out_i = sum_j weights[i,j] psi((x_j - translations[i,j]) / exp(log_scales[i,j]))."""

    weights: np.ndarray
    translations: np.ndarray
    log_scales: np.ndarray

    kind = "wavelet"
    param_names = ("weights", "translations", "log_scales")

    def __post_init__(self):
        if not (self.weights.shape == self.translations.shape == self.log_scales.shape):
            raise ValueError("wavelet parameter matrices must share one shape")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def forward(self, x, feats=None):
        x = _check_input(x, self.in_dim)
        inv_scale = np.exp(-self.log_scales)
        u = (x[:, None, :] - self.translations) * inv_scale
        y = np.einsum("oi,boi->bo", self.weights, mexican_hat(u))
        return y, (u, inv_scale)

    def backward(self, cache, grad_out, need_input_grad=True):
        u, inv_scale = cache
        psi = mexican_hat(u)
        # d out_o / d u_{oi} for every sample
        g_u = grad_out[:, :, None] * self.weights * _mexican_hat_grad(u)
        g_u_sum = g_u.sum(axis=0)
        grads = {
            "weights": np.einsum("bo,boi->oi", grad_out, psi),
            "translations": -g_u_sum * inv_scale,
            "log_scales": -np.einsum("boi,boi->oi", g_u, u),
        }
        dx = np.einsum("boi,oi->bi", g_u, inv_scale) if need_input_grad else None
        return grads, dx


@dataclass
class KanNetwork:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        kinds = {layer.kind for layer in self.layers}
        if len(kinds) != 1:
            raise ValueError(f"layers must share one kind, got {sorted(kinds)}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def kind(self) -> str:
        return self.layers[0].kind

    @property
    def architecture(self) -> tuple[int, ...]:
        return (self.layers[0].in_dim,) + tuple(layer.out_dim for layer in self.layers)

    def parameters(self) -> list[np.ndarray]:
        return [getattr(layer, name) for layer in self.layers for name in layer.param_names]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def input_features(self, x):
        """Input-only first-layer quantities, reusable across epochs (None for wavelet nets)."""
        first = self.layers[0]
        return first.features(_check_input(x, first.in_dim)) if first.kind == "spline" else None

    def forward(self, x, first_feats=None):
        """Batched forward pass; returns (outputs, caches)."""
        caches = []
        h = x
        for i, layer in enumerate(self.layers):
            h, cache = layer.forward(h, first_feats if i == 0 else None)
            caches.append(cache)
        return h, caches

    def backward(self, caches, grad_out, need_input_grad=False):
        """Returns (parameter gradients aligned with :meth:`parameters`, input gradient)."""
        grads = []
        g = grad_out
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            g_params, g = layer.backward(caches[i], g, need_input_grad=need_input_grad or i > 0)
            grads.append([g_params[name] for name in layer.param_names])
        flat = [g for layer_grads in reversed(grads) for g in layer_grads]
        return flat, g

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        y, _ = self.forward(x[None, :] if single else x)
        return y[0] if single else y


def network_forward(x, net: KanNetwork) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.architecture[0]:
        raise ValueError(f"input length {x.shape[-1]} != network input width {net.architecture[0]}")
    return net(x)


def network_gradients(net: KanNetwork, x, upstream_gradient, caches=None):
    """Exact gradients of ``sum(upstream * net(x))`` w.r.t. every parameter and the input."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    g = np.asarray(upstream_gradient, dtype=float)
    gb = g[None, :] if single else g
    if caches is None:
        _, caches = net.forward(xb)
    elif len(caches) != len(net.layers):
        raise ValueError("forward intermediates do not match the network")
    grads, dx = net.backward(caches, gb, need_input_grad=True)
    return grads, (dx[0] if single else dx)


def parse_architecture(text) -> tuple[int, ...]:
    """Parse "[500, 100, 500]" (or a sequence of ints) into a width tuple."""
    if isinstance(text, (list, tuple)):
        tokens = list(text)
    else:
        body = str(text).strip()
        if body.startswith("[") and body.endswith("]"):
            body = body[1:-1]
        tokens = [t.strip() for t in body.split(",")]
    widths = []
    for tok in tokens:
        try:
            w = int(tok)
        except (TypeError, ValueError):
            raise ValueError(f"bad architecture token {tok!r} in {text!r}") from None
        if w < 1:
            raise ValueError(f"bad architecture token {tok!r} in {text!r}: widths must be positive")
        widths.append(w)
    if len(widths) < 2:
        raise ValueError(f"architecture {text!r} needs at least input and output widths")
    return tuple(widths)


def _init_layer(rng, in_dim, out_dim, kind, grid):
    bound = math.sqrt(6.0 / in_dim)
    if kind == "spline":
        return SplineLayer(
            base_weights=rng.uniform(-bound, bound, size=(out_dim, in_dim)),
            spline_coeffs=rng.normal(0.0, 0.1 / math.sqrt(in_dim), size=(out_dim, in_dim, grid.n_basis)),
            grid=grid,
        )
    if kind == "wavelet":
        return WaveletLayer(
            weights=rng.uniform(-bound, bound, size=(out_dim, in_dim)),
            translations=rng.uniform(grid.lo, grid.hi, size=(out_dim, in_dim)),
            log_scales=np.zeros((out_dim, in_dim)),
        )
    raise ValueError(f"unknown layer kind {kind!r}")


def init_network(architecture, kind: str = "spline", seed: int = 0, grid: SplineGrid | None = None,
                 output_layer_scale: float = 1.0) -> KanNetwork:
    """Random network for the width tuple ``architecture``; deterministic per seed.

    ``output_layer_scale`` multiplies the output-amplitude parameters of the
    last layer (base weights and spline coefficients, or wavelet weights).
    """
    widths = parse_architecture(architecture)
    grid = grid or SplineGrid()
    rng = np.random.default_rng(seed)
    layers = [_init_layer(rng, a, b, kind, grid) for a, b in zip(widths, widths[1:])]
    if output_layer_scale != 1.0:
        last = layers[-1]
        for name in ("base_weights", "spline_coeffs") if kind == "spline" else ("weights",):
            getattr(last, name)[...] *= output_layer_scale
    return KanNetwork(layers)


def network_to_dict(net: KanNetwork) -> dict:
    grid = net.layers[0].grid if net.kind == "spline" else SplineGrid()
    return {
        "format_version": FORMAT_VERSION,
        "kind": net.kind,
        "architecture": list(net.architecture),
        "grid": grid.to_dict(),
        "layers": [
            {name: {"shape": list(getattr(layer, name).shape), "data": getattr(layer, name).ravel().tolist()}
             for name in layer.param_names}
            for layer in net.layers
        ],
    }


def _array(entry, name):
    try:
        shape = tuple(int(s) for s in entry["shape"])
        data = np.asarray(entry["data"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed parameter array {name!r}: {exc}") from None
    if data.size != math.prod(shape):
        raise CheckpointError(f"parameter {name!r}: {data.size} values for shape {shape}")
    return data.reshape(shape)


def network_from_dict(doc: dict) -> KanNetwork:
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    kind = doc.get("kind")
    grid = SplineGrid.from_dict(doc["grid"])
    layers = []
    for i, entry in enumerate(doc["layers"]):
        arrays = {name: _array(entry[name], f"layers[{i}].{name}") for name in entry}
        try:
            if kind == "spline":
                layers.append(SplineLayer(arrays["base_weights"], arrays["spline_coeffs"], grid))
            elif kind == "wavelet":
                layers.append(WaveletLayer(arrays["weights"], arrays["translations"], arrays["log_scales"]))
            else:
                raise CheckpointError(f"unknown network kind {kind!r}")
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"layer {i}: {exc}") from None
    net = KanNetwork(layers)
    if list(net.architecture) != list(doc["architecture"]):
        raise CheckpointError(f"architecture {doc['architecture']} does not match layer shapes {net.architecture}")
    return net


def save_network(net: KanNetwork, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net)))


def load_network(path) -> KanNetwork:
    return network_from_dict(json.loads(Path(path).read_text()))
