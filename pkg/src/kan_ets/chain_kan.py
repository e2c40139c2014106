"""Chain of KANs: one small network per output time step, fed only past and present inputs.

Member ``k`` (1-based) sees the window ``[h_{k-W+1}, ..., h_k]``; positions
before the start of the series are filled with zeros.  Members share an
architecture ``[W, ..., 1]`` but no parameters.

For spline members the first-layer features (SiLU values and B-spline bases)
depend only on the input, so they are computed once on the zero-padded series
and every member reads its window as a slice.  This keeps the per-member
computation path identical to evaluating the member on its own window, which
is what makes causality exact rather than approximate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kan_ets.kan import (
    FORMAT_VERSION,
    CheckpointError,
    KanNetwork,
    SplineGrid,
    init_network,
    network_from_dict,
    network_to_dict,
    parse_architecture,
)

__all__ = [
    "ChainModel",
    "causal_input",
    "chain_forward",
    "chain_gradients",
    "init_chain",
    "save_chain",
    "load_chain",
]


def causal_input(h, k: int, window: int) -> np.ndarray:
    """``[h_{k-W+1}, ..., h_k]`` with 1-based ``k`` and left zero-padding."""
    h = np.asarray(h, dtype=float)
    n = h.shape[-1]
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= n:
        raise ValueError(f"time index k={k!r} outside 1..{n}")
    if window < 1:
        raise ValueError(f"window must be positive, got {window}")
    out = np.zeros(h.shape[:-1] + (window,))
    take = min(k, window)
    out[..., window - take:] = h[..., k - take:k]
    return out


def _pad(x: np.ndarray, window: int) -> np.ndarray:
    return np.concatenate([np.zeros(x.shape[:-1] + (window - 1,)), x], axis=-1)


@dataclass
class ChainModel:
    members: list
    window: int

    def __post_init__(self):
        if not self.members:
            raise ValueError("a chain needs at least one member")
        arch = self.members[0].architecture
        kind = self.members[0].kind
        for i, m in enumerate(self.members):
            if m.architecture != arch or m.kind != kind:
                raise ValueError(f"member {i} has architecture {m.kind} {m.architecture}, expected {kind} {arch}")
        if arch[0] != self.window or arch[-1] != 1:
            raise ValueError(f"member architecture {list(arch)} must be [window={self.window}, ..., 1]")
        if self.window > len(self.members):
            raise ValueError(f"window {self.window} exceeds series length {len(self.members)}")

    @property
    def n_steps(self) -> int:
        return len(self.members)

    @property
    def kind(self) -> str:
        return self.members[0].kind

    @property
    def member_architecture(self) -> tuple[int, ...]:
        return self.members[0].architecture

    @property
    def architecture(self) -> tuple[int, ...]:
        """Series-level shape: N_T inputs to N_T outputs."""
        return (self.n_steps, self.n_steps)

    def parameters(self) -> list[np.ndarray]:
        return [p for m in self.members for p in m.parameters()]

    def n_parameters(self) -> int:
        return sum(m.n_parameters() for m in self.members)

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_steps:
            raise ValueError(f"expected input of shape (batch, {self.n_steps}), got {x.shape}")
        return x

    def input_features(self, x):
        """Padded input plus, for spline members, first-layer features of the padded input."""
        padded = _pad(self._check(x), self.window)
        if self.kind == "spline":
            return padded, self.members[0].layers[0].features(padded)
        return padded, None

    def _window(self, feats, k):
        padded, shared = feats
        sl = slice(k, k + self.window)
        xk = padded[:, sl]
        if shared is None:
            return xk, None
        return xk, tuple(f[:, sl] for f in shared)

    def forward(self, x, first_feats=None):
        """Batched forward pass, (batch, N_T) -> (batch, N_T); returns (outputs, caches)."""
        feats = self.input_features(x) if first_feats is None else first_feats
        batch = feats[0].shape[0]
        y = np.empty((batch, self.n_steps))
        caches = []
        for k, member in enumerate(self.members):
            xk, fk = self._window(feats, k)
            out, cache = member.forward(xk, fk)
            y[:, k] = out[:, 0]
            caches.append(cache)
        return y, caches

    def backward(self, caches, grad_out, need_input_grad=False):
        """Parameter gradients aligned with :meth:`parameters` (and the input gradient if asked)."""
        if len(caches) != self.n_steps:
            raise ValueError("forward intermediates missing or from a different chain")
        grad_out = np.asarray(grad_out, dtype=float)
        flat = []
        dx_pad = np.zeros((grad_out.shape[0], self.n_steps + self.window - 1)) if need_input_grad else None
        for k, member in enumerate(self.members):
            g, dx = member.backward(caches[k], grad_out[:, k:k + 1], need_input_grad=need_input_grad)
            flat.extend(g)
            if need_input_grad:
                dx_pad[:, k:k + self.window] += dx
        return flat, (dx_pad[:, self.window - 1:] if need_input_grad else None)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        y, _ = self.forward(x[None, :] if single else x)
        return y[0] if single else y


def init_chain(n_steps: int, hidden=(3,), window: int | None = None, kind: str = "spline",
               seed: int = 0, grid: SplineGrid | None = None, output_layer_scale: float = 1.0) -> ChainModel:
    """Chain of ``n_steps`` members with architecture ``[window, *hidden, 1]``.

    Member seeds are spawned from ``seed`` so members start from different
    (but reproducible) parameters.
    """
    window = n_steps if window is None else int(window)
    hidden = parse_architecture(list(hidden) + [1])[:-1] if hidden else ()
    arch = (window, *hidden, 1)
    seeds = np.random.SeedSequence(seed).generate_state(n_steps)
    members = [init_network(arch, kind, int(s), grid, output_layer_scale) for s in seeds]
    return ChainModel(members, window)


def chain_forward(h, model: ChainModel) -> np.ndarray:
    """Predicted series for one input series (or a batch of them)."""
    h = np.asarray(h, dtype=float)
    if h.shape[-1] != model.n_steps:
        raise ValueError(f"input length {h.shape[-1]} != chain length {model.n_steps}")
    return model(h)


def chain_gradients(model: ChainModel, h, upstream, caches=None) -> list[list[np.ndarray]]:
    """Per-member parameter gradients of ``sum(upstream * chain_forward(h))``.

    ``upstream[k]`` is dLoss/dŶ_k; any coupling between steps (such as a
    finite-difference penalty) must already be folded into it.
    """
    h = np.asarray(h, dtype=float)
    single = h.ndim == 1
    hb = h[None, :] if single else h
    g = np.asarray(upstream, dtype=float)
    gb = g[None, :] if single else g
    if gb.shape != hb.shape:
        raise ValueError(f"upstream gradient shape {g.shape} != input shape {h.shape}")
    if caches is None:
        _, caches = model.forward(hb)
    flat, _ = model.backward(caches, gb)
    per = len(model.members[0].parameters())
    return [flat[i:i + per] for i in range(0, len(flat), per)]


def chain_to_dict(model: ChainModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "n_members": model.n_steps,
        "window": model.window,
        "member_architecture": list(model.member_architecture),
        "members": [network_to_dict(m) for m in model.members],
    }


def chain_from_dict(doc: dict) -> ChainModel:
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported chain format_version {doc.get('format_version')!r}")
    try:
        members = [network_from_dict(m) for m in doc["members"]]
        n, window, arch = int(doc["n_members"]), int(doc["window"]), tuple(doc["member_architecture"])
    except KeyError as exc:
        raise CheckpointError(f"chain checkpoint missing field {exc.args[0]!r}") from None
    if len(members) != n:
        raise CheckpointError(f"chain checkpoint lists {len(members)} members, header says {n}")
    if members and members[0].architecture != arch:
        raise CheckpointError(f"member architecture {members[0].architecture} != header {list(arch)}")
    try:
        return ChainModel(members, window)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None


def save_chain(model: ChainModel, path) -> None:
    Path(path).write_text(json.dumps(chain_to_dict(model)))


def load_chain(path) -> ChainModel:
    return chain_from_dict(json.loads(Path(path).read_text()))
