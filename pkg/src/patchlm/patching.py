"""Patch boundary schemes, threshold calibration, and incrementality checking.

Every scheme maps a byte sequence to a strictly increasing list of patch start
indices beginning at 0; patches partition the sequence with no gaps or
overlaps. All schemes are pure functions of (bytes, config, model), and every
scheme enforces a maximum patch size so a single patch can never blow up
memory downstream (forced splits are counted).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .entropy_lm import LN256, EntropyModel, EntropyTrace

logger = logging.getLogger(__name__)

DEFAULT_MAX_PATCH = 512

SCHEMES = ("strided", "space", "entropy_global", "entropy_monotonic", "entropy_or", "bpe")


class PatchingError(Exception):
    pass


class CalibrationError(PatchingError):
    """Requested mean patch size is not achievable; carries the feasible range."""

    def __init__(self, msg: str, achievable: tuple[float, float] | None = None):
        super().__init__(msg)
        self.achievable = achievable


@dataclass(frozen=True)
class PatchBoundaries:
    """Sorted patch start indices over a byte sequence of length ``n_bytes``."""

    starts: np.ndarray
    n_bytes: int

    def __post_init__(self):
        starts = np.asarray(self.starts, dtype=np.int64)
        object.__setattr__(self, "starts", starts)
        if self.n_bytes < 0:
            raise PatchingError("n_bytes must be >= 0")
        if self.n_bytes == 0:
            if len(starts):
                raise PatchingError("empty sequence cannot have patch starts")
            return
        if len(starts) == 0 or starts[0] != 0:
            raise PatchingError("first byte must start a patch")
        if np.any(np.diff(starts) <= 0):
            raise PatchingError("patch starts must be strictly increasing")
        if starts[-1] >= self.n_bytes:
            raise PatchingError("patch starts must be < n_bytes")

    @property
    def n_patches(self) -> int:
        return len(self.starts)

    def lengths(self) -> np.ndarray:
        if self.n_bytes == 0:
            return np.zeros(0, dtype=np.int64)
        return np.diff(np.append(self.starts, self.n_bytes))

    def ends(self) -> np.ndarray:
        """Index of the last byte of each patch."""
        return np.append(self.starts[1:], self.n_bytes) - 1

    def patch_of(self, positions=None) -> np.ndarray:
        """Patch index of each byte position."""
        pos = np.arange(self.n_bytes) if positions is None else np.asarray(positions)
        return np.searchsorted(self.starts, pos, side="right") - 1

    def flags(self) -> np.ndarray:
        """Boolean start-of-patch indicator per byte."""
        out = np.zeros(self.n_bytes, dtype=bool)
        out[self.starts] = True
        return out


@dataclass
class PatchStats:
    mean_patch_size: float
    histogram: dict[int, int]
    n_patches: int
    n_bytes: int
    forced_splits: int = 0


@dataclass
class PatchingConfig:
    """Declarative patcher choice; training and inference thresholds may differ."""

    scheme: str = "entropy_global"
    k: int = 4
    theta_g: float | None = None
    theta_r: float | None = None
    theta_g_inference: float | None = None
    theta_r_inference: float | None = None
    reset_on_newline: bool = False
    max_patch_size: int = DEFAULT_MAX_PATCH
    entropy_model_path: str | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise PatchingError(f"unknown scheme {self.scheme!r}; pick one of {SCHEMES}")
        if self.k < 1:
            raise PatchingError("strided k must be >= 1")
        for name in ("theta_g", "theta_r", "theta_g_inference", "theta_r_inference"):
            val = getattr(self, name)
            if val is not None and not math.isfinite(val):
                raise PatchingError(f"{name} must be finite")
        if self.theta_g is not None and self.theta_g < 0:
            raise PatchingError("theta_g must be nonnegative")
        if self.max_patch_size < 1:
            raise PatchingError("max_patch_size must be >= 1")


def _as_array(data) -> np.ndarray:
    if hasattr(data, "data") and not isinstance(data, np.ndarray):
        data = data.data
    if isinstance(data, (bytes, bytearray)):
        return np.frombuffer(bytes(data), dtype=np.uint8)
    return np.asarray(data, dtype=np.uint8)


def enforce_max_patch(starts: np.ndarray, n_bytes: int, max_patch: int | None) -> tuple[np.ndarray, int]:
    """Split any patch longer than ``max_patch``; returns (starts, forced split count)."""
    if max_patch is None or n_bytes == 0:
        return starts, 0
    lengths = np.diff(np.append(starts, n_bytes))
    long = np.nonzero(lengths > max_patch)[0]
    if len(long) == 0:
        return starts, 0
    extra = [np.arange(starts[i] + max_patch, starts[i] + lengths[i], max_patch) for i in long]
    forced = sum(len(e) for e in extra)
    merged = np.sort(np.concatenate([starts] + extra))
    return merged, forced


def _from_flags(flags: np.ndarray, max_patch: int | None) -> PatchBoundaries:
    n = len(flags)
    if n == 0:
        return PatchBoundaries(np.zeros(0, np.int64), 0)
    flags = flags.copy()
    flags[0] = True
    starts = np.nonzero(flags)[0].astype(np.int64)
    starts, _ = enforce_max_patch(starts, n, max_patch)
    return PatchBoundaries(starts, n)


# ---------------------------------------------------------------------------
# Schemes
# ---------------------------------------------------------------------------


def patch_strided(n_bytes: int, k: int, max_patch: int | None = DEFAULT_MAX_PATCH) -> PatchBoundaries:
    """A patch starts every k bytes."""
    if k < 1:
        raise PatchingError("stride k must be >= 1")
    if n_bytes == 0:
        return PatchBoundaries(np.zeros(0, np.int64), 0)
    starts = np.arange(0, n_bytes, k, dtype=np.int64)
    starts, _ = enforce_max_patch(starts, n_bytes, max_patch)
    return PatchBoundaries(starts, n_bytes)


_SPACE_LIKE = np.ones(256, dtype=bool)
for _b in range(256):
    if 0x41 <= _b <= 0x5A or 0x61 <= _b <= 0x7A:  # ASCII letters
        _SPACE_LIKE[_b] = False
    elif 0x30 <= _b <= 0x39:  # digits
        _SPACE_LIKE[_b] = False
    elif 0x80 <= _b <= 0xBF:  # UTF-8 continuation bytes
        _SPACE_LIKE[_b] = False


def space_like_mask(data) -> np.ndarray:
    """True where a byte is space-like: not an ASCII letter, digit, or UTF-8 continuation byte."""
    return _SPACE_LIKE[_as_array(data)]


def patch_space(data, max_patch: int | None = DEFAULT_MAX_PATCH) -> PatchBoundaries:
    """Boundary where the previous byte is space-like and the current one is not.

    Runs of space-like bytes stay glued to the preceding patch, so every patch
    contains at least one non-space-like byte (except the degenerate all
    space-like input, which is a single patch).
    """
    arr = _as_array(data)
    n = len(arr)
    if n == 0:
        return PatchBoundaries(np.zeros(0, np.int64), 0)
    sl = _SPACE_LIKE[arr]
    flags = np.zeros(n, dtype=bool)
    flags[1:] = sl[:-1] & ~sl[1:]
    if not flags.any() and sl.all():
        logger.debug("space patching: degenerate all space-like input of %d bytes", n)
    return _from_flags(flags, max_patch)


def patch_entropy_global(trace: EntropyTrace, theta_g: float,
                         max_patch: int | None = DEFAULT_MAX_PATCH) -> PatchBoundaries:
    """A byte starts a patch when its entropy exceeds the global threshold."""
    flags = trace.values > theta_g
    return _from_flags(flags, max_patch)


def patch_entropy_monotonic(trace: EntropyTrace, theta_r: float,
                            max_patch: int | None = DEFAULT_MAX_PATCH) -> PatchBoundaries:
    """A byte starts a patch when entropy jumps over the previous byte by more than theta_r."""
    v = trace.values
    flags = np.zeros(len(v), dtype=bool)
    if len(v) > 1:
        flags[1:] = (v[1:] - v[:-1]) > theta_r
    return _from_flags(flags, max_patch)


def patch_entropy(trace: EntropyTrace, theta_g: float | None = None, theta_r: float | None = None,
                  max_patch: int | None = DEFAULT_MAX_PATCH) -> PatchBoundaries:
    """OR-combination of the global and jump constraints (either may be disabled)."""
    if theta_g is None and theta_r is None:
        raise PatchingError("need at least one of theta_g, theta_r")
    v = trace.values
    flags = np.zeros(len(v), dtype=bool)
    if theta_g is not None:
        flags |= v > theta_g
    if theta_r is not None and len(v) > 1:
        flags[1:] |= (v[1:] - v[:-1]) > theta_r
    return _from_flags(flags, max_patch)


def bpe_adapter(token_starts: Sequence[int] | np.ndarray, n_bytes: int,
                max_patch: int | None = DEFAULT_MAX_PATCH) -> PatchBoundaries:
    """Wrap externally computed token start offsets as patch boundaries."""
    starts = np.asarray(token_starts, dtype=np.int64)
    starts, _ = enforce_max_patch(starts, n_bytes, max_patch)
    return PatchBoundaries(starts, n_bytes)


# ---------------------------------------------------------------------------
# Stats, calibration, incrementality
# ---------------------------------------------------------------------------


def patch_stats(boundaries: PatchBoundaries) -> PatchStats:
    lengths = boundaries.lengths()
    hist: dict[int, int] = {}
    for size, cnt in zip(*np.unique(lengths, return_counts=True)):
        hist[int(size)] = int(cnt)
    mean = boundaries.n_bytes / boundaries.n_patches if boundaries.n_patches else 0.0
    return PatchStats(mean, hist, boundaries.n_patches, boundaries.n_bytes)


Patcher = Callable[[np.ndarray], PatchBoundaries]


def make_patcher(config: PatchingConfig, entropy_model: EntropyModel | None = None,
                 bpe_vocab=None, inference: bool = False) -> Patcher:
    """Close a PatchingConfig over its models into a bytes -> boundaries function."""
    mp = config.max_patch_size
    if config.scheme == "strided":
        return lambda data: patch_strided(len(_as_array(data)), config.k, mp)
    if config.scheme == "space":
        return lambda data: patch_space(data, mp)
    if config.scheme == "bpe":
        if bpe_vocab is None:
            raise PatchingError("bpe scheme needs a trained vocabulary")
        return lambda data: bpe_adapter(bpe_vocab.token_starts(_as_array(data)), len(_as_array(data)), mp)
    if entropy_model is None:
        raise PatchingError(f"scheme {config.scheme!r} needs an entropy model")
    theta_g = config.theta_g_inference if (inference and config.theta_g_inference is not None) else config.theta_g
    theta_r = config.theta_r_inference if (inference and config.theta_r_inference is not None) else config.theta_r
    reset = config.reset_on_newline

    def run(data):
        trace = entropy_model.entropy_trace(_as_array(data), reset_on_newline=reset)
        if config.scheme == "entropy_global":
            if theta_g is None:
                raise PatchingError("entropy_global needs theta_g")
            return patch_entropy_global(trace, theta_g, mp)
        if config.scheme == "entropy_monotonic":
            if theta_r is None:
                raise PatchingError("entropy_monotonic needs theta_r")
            return patch_entropy_monotonic(trace, theta_r, mp)
        return patch_entropy(trace, theta_g, theta_r, mp)

    return run


def _mean_size_at(traces: list[EntropyTrace], theta: float, scheme: str, max_patch: int | None) -> float:
    total_bytes = 0
    total_patches = 0
    for tr in traces:
        if scheme == "entropy_global":
            b = patch_entropy_global(tr, theta, max_patch)
        else:
            b = patch_entropy_monotonic(tr, theta, max_patch)
        total_bytes += b.n_bytes
        total_patches += b.n_patches
    return total_bytes / total_patches


def calibrate_threshold(
    model: EntropyModel,
    sample: Iterable,
    target_patch_size: float,
    scheme: str = "entropy_global",
    reset_on_newline: bool = False,
    max_patch: int | None = DEFAULT_MAX_PATCH,
    tol: float = 0.02,
    iters: int = 60,
) -> float:
    """Bisect the entropy threshold so the sample's mean patch size hits the target.

    Mean patch size is monotone nondecreasing in the threshold (raising it can
    only remove boundaries); for the jump scheme this is verified on the
    bracket rather than assumed. Raises CalibrationError with the achievable
    range when the target cannot be met within ``tol``.
    """
    if not (1.0 < target_patch_size <= 64.0):
        raise CalibrationError(f"target patch size must be in (1, 64], got {target_patch_size}")
    if scheme not in ("entropy_global", "entropy_monotonic"):
        raise CalibrationError(f"calibration supports entropy schemes, not {scheme!r}")
    docs = [_as_array(d) for d in sample]
    n_total = sum(len(d) for d in docs)
    if n_total < 10**5:
        raise CalibrationError(f"calibration sample too small: {n_total} bytes < 1e5")
    traces = [model.entropy_trace(d, reset_on_newline=reset_on_newline) for d in docs]

    lo, hi = (0.0, LN256 + 1.0) if scheme == "entropy_global" else (-LN256 - 1.0, LN256 + 1.0)
    size_lo = _mean_size_at(traces, lo, scheme, max_patch)
    size_hi = _mean_size_at(traces, hi, scheme, max_patch)
    if size_lo > size_hi:
        raise CalibrationError(f"mean patch size not monotone over bracket for {scheme}")
    if not (size_lo <= target_patch_size <= size_hi):
        raise CalibrationError(
            f"target {target_patch_size} outside achievable mean patch size range "
            f"[{size_lo:.3f}, {size_hi:.3f}]",
            achievable=(size_lo, size_hi),
        )
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if _mean_size_at(traces, mid, scheme, max_patch) < target_patch_size:
            lo = mid
        else:
            hi = mid
    _, theta = min((abs(_mean_size_at(traces, t, scheme, max_patch) - target_patch_size), t)
                   for t in (lo, hi))
    achieved = _mean_size_at(traces, theta, scheme, max_patch)
    if abs(achieved - target_patch_size) / target_patch_size > tol:
        raise CalibrationError(
            f"calibration missed target {target_patch_size}: closest achievable {achieved:.4f}",
            achievable=(size_lo, size_hi),
        )
    return theta


def check_incrementality(patcher: Patcher, data, n_prefixes: int = 100, seed: int = 0) -> list[int]:
    """Compare patching of random prefixes against the full sequence's prefix.

    For each random cut i, the prefix bytes[:i] is patched from scratch and its
    starts must equal the full-sequence starts below i. Returns the cut points
    that disagree (empty list for an incremental scheme).
    """
    arr = _as_array(data)
    n = len(arr)
    if n < 2:
        return []
    full = patcher(arr).starts
    rng = np.random.Generator(np.random.PCG64(seed))
    cuts = rng.integers(1, n, size=n_prefixes)
    bad = []
    for i in sorted(set(int(c) for c in cuts)):
        prefix_starts = patcher(arr[:i]).starts
        expected = full[full < i]
        if len(prefix_starts) != len(expected) or np.any(prefix_starts != expected):
            bad.append(i)
    return bad


def write_boundaries_tsv(path: str | Path, items: Iterable[tuple[str, PatchBoundaries]]) -> None:
    """TSV export: one (doc_id, start_index) row per patch."""
    with open(path, "w") as fh:
        fh.write("doc_id\tstart_index\n")
        for doc_id, bounds in items:
            for s in bounds.starts:
                fh.write(f"{doc_id}\t{int(s)}\n")
