"""Driven-chain datasets: recipes, generation, MinMax scaling, splits, JSON persistence."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from kan_ets.spin_dynamics import (
    DEFAULT_CHAIN,
    DriveSignal,
    SimulationError,
    SpinChainParams,
    TrajectorySample,
    evolve_batch,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
REQUIRED_SECTIONS = ("format_version", "recipe", "dt", "samples", "scaler", "split")


class DatasetError(ValueError):
    """Malformed, inconsistent or unreadable dataset."""


def frequency_grid(omega_min: float, omega_max: float, n: int) -> np.ndarray:
    """``n`` equispaced frequencies including both endpoints."""
    if n < 2:
        raise ValueError(f"need at least 2 frequencies, got {n}")
    if not (omega_min > 0 and omega_max > omega_min):
        raise ValueError(f"invalid frequency range [{omega_min}, {omega_max}]")
    return np.linspace(omega_min, omega_max, n)


def amplitude_grid(a1: float, am: float, m: int) -> np.ndarray:
    """A_j = a1 + (j-1)(am - a1)/(m-1), j = 1..m."""
    if m < 1:
        raise ValueError("need at least one amplitude")
    if am < a1:
        raise ValueError(f"largest amplitude {am} below smallest {a1}")
    if m == 1:
        return np.array([float(a1)])
    j = np.arange(1, m + 1)
    return a1 + (j - 1) * (am - a1) / (m - 1)


@dataclass(frozen=True)
class DatasetRecipe:
    amplitudes: tuple[float, ...]
    n_frequencies: int
    omega_min: float = 0.4
    omega_max: float = 4.0
    n_steps: int = 500
    chain: SpinChainParams = DEFAULT_CHAIN

    def __post_init__(self):
        amps = tuple(float(a) for a in self.amplitudes)
        object.__setattr__(self, "amplitudes", amps)
        if not amps:
            raise ValueError("recipe needs at least one amplitude")
        if any(b <= a for a, b in zip(amps, amps[1:])):
            raise ValueError("amplitudes must be strictly increasing")
        if not self.omega_min > 0:
            raise ValueError("omega_min must be positive")
        if self.omega_max <= self.omega_min:
            raise ValueError("omega_max must exceed omega_min")
        if self.n_frequencies < 2:
            raise ValueError("n_frequencies must be >= 2")
        if self.n_steps < 3:
            raise ValueError("n_steps must be >= 3")

    @property
    def total_time(self) -> float:
        return 2.0 * math.pi / self.omega_min

    @property
    def dt(self) -> float:
        return self.total_time / self.n_steps

    @property
    def frequencies(self) -> np.ndarray:
        return frequency_grid(self.omega_min, self.omega_max, self.n_frequencies)

    @property
    def n_samples(self) -> int:
        return len(self.amplitudes) * self.n_frequencies

    def to_dict(self) -> dict:
        c = self.chain
        return {
            "amplitudes": list(self.amplitudes),
            "n_frequencies": self.n_frequencies,
            "omega_min": self.omega_min,
            "omega_max": self.omega_max,
            "n_steps": self.n_steps,
            "chain": {"jz": c.jz, "hx": c.hx, "hz": c.hz, "n_sites": c.n_sites},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecipe":
        c = d["chain"]
        return cls(
            amplitudes=tuple(d["amplitudes"]),
            n_frequencies=int(d["n_frequencies"]),
            omega_min=float(d["omega_min"]),
            omega_max=float(d["omega_max"]),
            n_steps=int(d["n_steps"]),
            chain=SpinChainParams(float(c["jz"]), float(c["hx"]), float(c["hz"]), int(c["n_sites"])),
        )


def preset_recipe(preset: int, n_sites: int = 8, n_frequencies: int | None = None, n_steps: int = 500) -> DatasetRecipe:
    """The four benchmark recipes; ``n_frequencies`` overrides the default N_omega."""
    chain = DEFAULT_CHAIN.with_sites(n_sites)
    if preset == 1:
        amps, n_w, w_max = (2.6,), 200, 4.0
    elif preset == 2:
        amps, n_w, w_max = (10.0,), 200, 4.0
    elif preset == 3:
        amps, n_w, w_max = tuple(amplitude_grid(0.4, 2.6, 8)), 200, 3.0
    elif preset == 4:
        amps, n_w, w_max = tuple(amplitude_grid(1.0, 10.0, 10)), 400, 4.0
    else:
        raise ValueError(f"unknown dataset preset {preset!r}; expected 1-4")
    return DatasetRecipe(amps, n_frequencies or n_w, 0.4, w_max, n_steps, chain)


@dataclass(frozen=True)
class ScalerParams:
    input_min: float
    input_max: float
    output_min: float
    output_max: float

    def __post_init__(self):
        if not self.input_max > self.input_min:
            raise ValueError("degenerate input channel: max <= min")
        if not self.output_max > self.output_min:
            raise ValueError("degenerate output channel: max <= min")

    def bounds(self, channel: str) -> tuple[float, float]:
        if channel == "input":
            return self.input_min, self.input_max
        if channel == "output":
            return self.output_min, self.output_max
        raise ValueError(f"unknown channel {channel!r}")

    @property
    def output_scale(self) -> float:
        """Slope of the output map; derivatives of scaled outputs pick up exactly this factor."""
        return 1.0 / (self.output_max - self.output_min)


def apply_scaler(series, scaler: ScalerParams, channel: str) -> np.ndarray:
    """(x - min)/(max - min).  Values outside the fitted range are not clipped."""
    lo, hi = scaler.bounds(channel)
    return (np.asarray(series, dtype=float) - lo) / (hi - lo)


def invert_scaler(series, scaler: ScalerParams, channel: str) -> np.ndarray:
    lo, hi = scaler.bounds(channel)
    return np.asarray(series, dtype=float) * (hi - lo) + lo


def scale_rhs(rhs, scaler: ScalerParams) -> np.ndarray:
    return np.asarray(rhs, dtype=float) * scaler.output_scale


@dataclass(frozen=True)
class Split:
    train: tuple[int, ...]
    test: tuple[int, ...]
    seed: int | None = None


@dataclass(frozen=True)
class Dataset:
    recipe: DatasetRecipe
    samples: tuple[TrajectorySample, ...]
    scaler: ScalerParams | None = None
    split: Split | None = None
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        n = self.recipe.n_steps
        for i, s in enumerate(self.samples):
            if s.drive.n_steps != n:
                raise DatasetError(f"sample {i} has {s.drive.n_steps} steps, recipe says {n}")
        if self.split is not None:
            tr, te = set(self.split.train), set(self.split.test)
            if tr & te:
                raise DatasetError("train and test indices overlap")
            if tr | te != set(range(len(self.samples))):
                raise DatasetError("split does not partition the samples")

    def __len__(self):
        return len(self.samples)

    @property
    def dt(self) -> float:
        return self.recipe.dt

    def _stack(self, name, getter):
        if name not in self._cache:
            arr = np.array([getter(s) for s in self.samples])
            arr.setflags(write=False)
            self._cache[name] = arr
        return self._cache[name]

    @property
    def inputs(self) -> np.ndarray:
        return self._stack("inputs", lambda s: s.drive.samples)

    @property
    def outputs(self) -> np.ndarray:
        return self._stack("outputs", lambda s: s.output)

    @property
    def rhs(self) -> np.ndarray:
        return self._stack("rhs", lambda s: s.ehrenfest_rhs)

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([s.drive.amplitude for s in self.samples])

    @property
    def omegas(self) -> np.ndarray:
        return np.array([s.drive.omega for s in self.samples])

    def scaled(self, indices=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(scaled inputs, scaled outputs, scaled Ehrenfest RHS) for the selected samples."""
        if self.scaler is None:
            raise DatasetError("dataset has no fitted scaler")
        idx = slice(None) if indices is None else np.asarray(indices, dtype=int)
        return (
            apply_scaler(self.inputs[idx], self.scaler, "input"),
            apply_scaler(self.outputs[idx], self.scaler, "output"),
            scale_rhs(self.rhs[idx], self.scaler),
        )

    def with_scaler(self, scaler: ScalerParams | None) -> "Dataset":
        return replace(self, scaler=scaler, _cache=self._cache)

    def with_split(self, split: Split | None) -> "Dataset":
        return replace(self, split=split, _cache=self._cache)

    def prepared(self, fraction: float = 0.8, seed: int = 0) -> "Dataset":
        """Split, then fit the scaler on the training part."""
        train, test = split_train_test(self, fraction, seed)
        ds = self.with_split(Split(tuple(train), tuple(test), seed))
        return ds.with_scaler(fit_scaler(ds, train))


def generate_dataset(recipe: DatasetRecipe, threads: int = 1, **sim_kwargs) -> Dataset:
    """Simulate one trajectory per (amplitude, frequency) pair, amplitude-major order."""
    freqs = recipe.frequencies
    dt = recipe.dt
    samples = []
    for amp in recipe.amplitudes:
        try:
            out, rhs = evolve_batch(
                recipe.chain, np.full(len(freqs), amp), freqs, dt, recipe.n_steps, threads=threads, **sim_kwargs
            )
        except SimulationError as exc:
            raise SimulationError(f"simulation failed for amplitude A={amp:g}: {exc}") from exc
        for j, w in enumerate(freqs):
            drive = DriveSignal.sinusoid(amp, w, dt, recipe.n_steps)
            samples.append(TrajectorySample(drive, out[j], rhs[j]))
        log.info("generated %d trajectories for A=%g", len(freqs), amp)
    return Dataset(recipe, samples)


def fit_scaler(dataset: Dataset, train_indices) -> ScalerParams:
    """Global min/max of inputs and of outputs over the training samples."""
    idx = np.asarray(train_indices, dtype=int)
    if idx.size == 0:
        raise ValueError("cannot fit a scaler on an empty training set")
    x = dataset.inputs[idx]
    y = dataset.outputs[idx]
    return ScalerParams(float(x.min()), float(x.max()), float(y.min()), float(y.max()))


def split_train_test(dataset: Dataset, fraction: float = 0.8, seed: int = 0) -> tuple[list[int], list[int]]:
    """Random train/test partition, stratified by amplitude; reproducible from ``seed``."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"train fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    amps = dataset.amplitudes
    train, test = [], []
    for a in np.unique(amps):
        group = np.flatnonzero(amps == a)
        perm = rng.permutation(group)
        n_test = int(round(len(group) * (1.0 - fraction)))
        test.extend(perm[:n_test].tolist())
        train.extend(perm[n_test:].tolist())
    if not train or not test:
        raise ValueError(f"split with fraction {fraction} leaves an empty side for {len(dataset)} samples")
    return sorted(train), sorted(test)


def _dataset_to_dict(ds: Dataset) -> dict:
    sc = ds.scaler
    return {
        "format_version": FORMAT_VERSION,
        "recipe": ds.recipe.to_dict(),
        "dt": ds.dt,
        "samples": [
            {
                "amplitude": s.drive.amplitude,
                "omega": s.drive.omega,
                "input": s.drive.samples.tolist(),
                "output": s.output.tolist(),
                "ehrenfest_rhs": s.ehrenfest_rhs.tolist(),
            }
            for s in ds.samples
        ],
        "scaler": None
        if sc is None
        else {
            "input_min": sc.input_min,
            "input_max": sc.input_max,
            "output_min": sc.output_min,
            "output_max": sc.output_max,
        },
        "split": None
        if ds.split is None
        else {"train": list(ds.split.train), "test": list(ds.split.test), "seed": ds.split.seed},
    }


def save_dataset(dataset: Dataset, path) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly.
    Path(path).write_text(json.dumps(_dataset_to_dict(dataset)), encoding="utf-8")


def _missing_section(text: str) -> str:
    for key in REQUIRED_SECTIONS:
        if f'"{key}"' not in text:
            return key
    # All keys present: the damage is inside the last section that starts.
    return max(REQUIRED_SECTIONS, key=lambda k: text.rfind(f'"{k}"'))


def load_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(
            f"{path}: malformed or truncated dataset file; section {_missing_section(text)!r} "
            f"is missing or incomplete ({exc.msg} at char {exc.pos})"
        ) from None
    for key in REQUIRED_SECTIONS:
        if key not in doc:
            raise DatasetError(f"{path}: missing section {key!r}")
    if doc["format_version"] != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported format_version {doc['format_version']!r}")
    recipe = DatasetRecipe.from_dict(doc["recipe"])
    dt = float(doc["dt"])
    if not math.isclose(dt, recipe.dt, rel_tol=1e-12):
        raise DatasetError(f"{path}: stored dt {dt} disagrees with recipe dt {recipe.dt}")
    samples = []
    for i, s in enumerate(doc["samples"]):
        lengths = {k: len(s[k]) for k in ("input", "output", "ehrenfest_rhs")}
        if set(lengths.values()) != {recipe.n_steps}:
            raise DatasetError(f"{path}: sample {i} series lengths {lengths}, expected {recipe.n_steps}")
        inp = np.asarray(s["input"], dtype=float)
        inp.setflags(write=False)
        drive = DriveSignal(float(s["amplitude"]), float(s["omega"]), dt, inp)
        samples.append(TrajectorySample(drive, np.asarray(s["output"], float), np.asarray(s["ehrenfest_rhs"], float)))
    if len(samples) != recipe.n_samples:
        raise DatasetError(f"{path}: {len(samples)} samples, recipe implies {recipe.n_samples}")
    scaler = None if doc["scaler"] is None else ScalerParams(**doc["scaler"])
    split = None
    if doc["split"] is not None:
        sp = doc["split"]
        split = Split(tuple(sp["train"]), tuple(sp["test"]), sp.get("seed"))
    return Dataset(recipe, samples, scaler, split)
