"""Event-sequence datasets: JSON Lines loading, validation, splits, batching.

File format (UTF-8, one JSON object per line):

    {"num_types": 3}                                   <- optional header, line 1
    {"events": [{"t": 0.5, "c": 1}, {"t": 1.2, "c": 3}, ...]}
    ...

Times are absolute and non-negative, type ids are 1..C.  Type id 0 is
reserved for padding and never appears in files.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_rng

log = logging.getLogger(__name__)

PAD_TYPE = 0
TIE_EPSILON = 1e-9


class DataError(ValueError):
    """A dataset file or dataset operation violated its contract."""


@dataclass(frozen=True)
class Event:
    time: float
    type_id: int


@dataclass
class EventSequence:
    """Ordered (time, type) pairs with strictly increasing times."""

    events: list[Event]

    def __len__(self):
        return len(self.events)

    def times(self) -> np.ndarray:
        return np.array([e.time for e in self.events], dtype=np.float64)

    def type_ids(self) -> np.ndarray:
        return np.array([e.type_id for e in self.events], dtype=np.int64)


@dataclass
class Dataset:
    sequences: list[EventSequence]
    num_types: int

    def __len__(self):
        return len(self.sequences)

    def total_events(self) -> int:
        return sum(len(s) for s in self.sequences)

    def scored_events(self) -> int:
        """Events that carry a prediction/likelihood term (all but the first
        of each sequence)."""
        return sum(max(len(s) - 1, 0) for s in self.sequences)


@dataclass(frozen=True)
class Batch:
    """Padded matrices for a group of sequences.

    ``pad_mask`` is True exactly on the first ``lengths[b]`` positions of row
    b; ``type_ids`` is 0 (PAD) where ``pad_mask`` is False.  ``seq_ids`` are
    the positions of each row's sequence in the source dataset, used to key
    per-sequence RNG streams independently of batching.
    """

    times: np.ndarray      # (B, I_max) float64
    type_ids: np.ndarray   # (B, I_max) int64, 0 = PAD
    pad_mask: np.ndarray   # (B, I_max) bool
    lengths: np.ndarray    # (B,) int64
    seq_ids: np.ndarray    # (B,) int64


def _break_ties(times: list[float], line_no: int) -> tuple[list[float], int]:
    """Make equal timestamps strictly increasing by adding k * TIE_EPSILON to
    the k-th event of each tie group.  Returns (times, number of ties)."""
    out = list(times)
    ties = 0
    i = 0
    n = len(out)
    while i < n:
        j = i + 1
        while j < n and out[j] == out[i]:
            j += 1
        for k in range(i + 1, j):
            out[k] = out[i] + (k - i) * TIE_EPSILON
            ties += 1
        i = j
    for a, b in zip(out, out[1:]):
        if b <= a:
            raise DataError(
                f"line {line_no}: timestamps not strictly increasing after "
                f"tie-breaking (sub-epsilon gap)")
    return out, ties


def _parse_sequence(obj, line_no: int, num_types: int | None) -> EventSequence:
    if not isinstance(obj, dict) or "events" not in obj:
        raise DataError(f"line {line_no}: expected an object with an 'events' list")
    raw = obj["events"]
    if not isinstance(raw, list) or not raw:
        raise DataError(f"line {line_no}: 'events' must be a non-empty list")
    times: list[float] = []
    types: list[int] = []
    for k, ev in enumerate(raw):
        if not isinstance(ev, dict) or "t" not in ev or "c" not in ev:
            raise DataError(f"line {line_no}: event {k} must have keys 't' and 'c'")
        t, c = ev["t"], ev["c"]
        if not isinstance(t, (int, float)) or isinstance(t, bool):
            raise DataError(f"line {line_no}: event {k}: time is not a number")
        if not isinstance(c, int) or isinstance(c, bool):
            raise DataError(f"line {line_no}: event {k}: type id is not an integer")
        t = float(t)
        if t < 0:
            raise DataError(f"line {line_no}: event {k}: negative time {t}")
        if c < 1:
            raise DataError(f"line {line_no}: event {k}: type_id out of range (got {c})")
        if num_types is not None and c > num_types:
            raise DataError(
                f"line {line_no}: event {k}: type_id out of range "
                f"(got {c}, declared num_types {num_types})")
        if times and t < times[-1]:
            raise DataError(f"line {line_no}: event {k}: timestamps decrease")
        times.append(t)
        types.append(c)
    times, ties = _break_ties(times, line_no)
    if ties:
        log.warning("line %d: broke %d timestamp tie(s) with epsilon %.0e",
                    line_no, ties, TIE_EPSILON)
    return EventSequence([Event(t, c) for t, c in zip(times, types)])


def load_dataset(path, declared_num_types: int | None = None) -> Dataset:
    """Load a JSON Lines dataset.

    ``num_types`` is, in order of preference: the ``declared_num_types``
    argument, the optional header line, or the maximum observed type id.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or all(not ln.strip() for ln in lines):
        raise DataError(f"{path}: empty dataset file")

    header_types: int | None = None
    sequences: list[EventSequence] = []
    start = 0
    first = json.loads(lines[0]) if lines[0].strip() else None
    if isinstance(first, dict) and "num_types" in first and "events" not in first:
        header_types = first["num_types"]
        if not isinstance(header_types, int) or header_types < 1:
            raise DataError("line 1: num_types header must be a positive integer")
        start = 1

    num_types = declared_num_types if declared_num_types is not None else header_types
    if num_types is not None and num_types < 1:
        raise DataError("declared_num_types must be a positive integer")

    for idx in range(start, len(lines)):
        line = lines[idx]
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as err:
            raise DataError(f"line {idx + 1}: malformed JSON ({err.msg})") from None
        sequences.append(_parse_sequence(obj, idx + 1, num_types))

    if not sequences:
        raise DataError(f"{path}: no sequences found")
    if num_types is None:
        num_types = max(e.type_id for s in sequences for e in s.events)
    return Dataset(sequences, num_types)


def save_dataset(path, dataset: Dataset) -> None:
    """Write a dataset back to JSON Lines (with a num_types header)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"num_types": dataset.num_types}) + "\n")
        for seq in dataset.sequences:
            obj = {"events": [{"t": e.time, "c": e.type_id} for e in seq.events]}
            fh.write(json.dumps(obj) + "\n")


def split_dataset(dataset: Dataset, ratios: tuple[float, float, float],
                  seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic shuffled train/dev/test partition.

    Sizes are floors of ratio * N, with the remainder handed out by largest
    fractional part (ties to the earlier part).
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise DataError("split ratios must be non-negative")
    n = len(dataset)
    if all(r > 0 for r in ratios) and n < 3:
        raise DataError("need at least 3 sequences for a three-way split")

    exact = [r * n for r in ratios]
    sizes = [int(np.floor(x)) for x in exact]
    rem = n - sum(sizes)
    order = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in range(rem):
        sizes[order[i % 3]] += 1
    for r, s in zip(ratios, sizes):
        if r > 0 and s == 0:
            raise DataError(f"degenerate split: ratio {r} yields an empty part")

    perm = derive_rng(seed).permutation(n)
    parts = []
    offset = 0
    for s in sizes:
        idx = sorted(perm[offset:offset + s])
        parts.append(Dataset([dataset.sequences[i] for i in idx], dataset.num_types))
        offset += s
    return tuple(parts)


def normalize_times(dataset: Dataset) -> Dataset:
    """Optionally rescale each sequence so its last timestamp is 1.0.

    Off by default everywhere; provided for datasets whose raw time units are
    too large for the intensity's normalized slope term.
    """
    out = []
    for seq in dataset.sequences:
        last = seq.events[-1].time
        if last <= 0:
            out.append(seq)
            continue
        out.append(EventSequence(
            [Event(e.time / last, e.type_id) for e in seq.events]))
    return Dataset(out, dataset.num_types)


def make_batches(dataset: Dataset, batch_size: int,
                 shuffle_seed: int | tuple | None = None) -> list[Batch]:
    """Group sequences into padded batches.

    Every sequence appears exactly once; with no seed the file order is
    preserved, otherwise the order is a deterministic shuffle of the seed
    (an int or a tuple of ints).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n)
    if shuffle_seed is not None:
        key = shuffle_seed if isinstance(shuffle_seed, tuple) else (shuffle_seed,)
        order = derive_rng(*key).permutation(n)

    batches = []
    for lo in range(0, n, batch_size):
        ids = order[lo:lo + batch_size]
        seqs = [dataset.sequences[i] for i in ids]
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        i_max = int(lengths.max())
        b = len(seqs)
        times = np.zeros((b, i_max), dtype=np.float64)
        type_ids = np.full((b, i_max), PAD_TYPE, dtype=np.int64)
        pad_mask = np.zeros((b, i_max), dtype=bool)
        for row, seq in enumerate(seqs):
            ln = lengths[row]
            times[row, :ln] = seq.times()
            type_ids[row, :ln] = seq.type_ids()
            pad_mask[row, :ln] = True
        batches.append(Batch(times, type_ids, pad_mask, lengths,
                             np.asarray(ids, dtype=np.int64)))
    return batches
