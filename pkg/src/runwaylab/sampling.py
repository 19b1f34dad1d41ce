"""Strategy-specific minibatch samplers.

Training is iteration-based, so samplers are infinite streams: each pool is
shuffled per epoch and consumed without replacement, reshuffling when it
runs out. The balanced sampler draws half the batch from each domain with
the two pools cycling independently. Without-replacement epochs are a
toolkit convention; the source protocol does not pin replacement semantics.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .dataset import Dataset, Sample


class SamplingError(Exception):
    pass


class EmptyPool(SamplingError):
    pass


class OddBatchForBalanced(SamplingError):
    pass


class SamplerKind(Enum):
    REAL_ONLY = "real_only"
    SYNTH_ONLY = "synth_only"
    MIX = "mix"
    BALANCED = "balanced"


class Strategy(Enum):
    """The five training strategies compared by the experiment runner.

    CARE is balanced sampling plus the feature-alignment loss; SAMPLER is
    balanced sampling alone.
    """

    REAL = "REAL"
    SYNTH = "SYNTH"
    MIX = "MIX"
    SAMPLER = "SAMPLER"
    CARE = "CARE"

    @property
    def sampler_kind(self) -> SamplerKind:
        return {
            Strategy.REAL: SamplerKind.REAL_ONLY,
            Strategy.SYNTH: SamplerKind.SYNTH_ONLY,
            Strategy.MIX: SamplerKind.MIX,
            Strategy.SAMPLER: SamplerKind.BALANCED,
            Strategy.CARE: SamplerKind.BALANCED,
        }[self]

    @property
    def uses_alignment(self) -> bool:
        return self is Strategy.CARE


@dataclass(frozen=True)
class Batch:
    samples: tuple[Sample, ...]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


class _PoolStream:
    """Infinite without-replacement stream over one pool of samples."""

    def __init__(self, samples: tuple[Sample, ...], seed_seq: np.random.SeedSequence):
        self._samples = samples
        self._rng = np.random.Generator(np.random.PCG64(seed_seq))
        self._order: np.ndarray = np.empty(0, dtype=np.int64)
        self._cursor = 0

    def take(self, n: int) -> list[Sample]:
        out: list[Sample] = []
        while len(out) < n:
            if self._cursor >= len(self._order):
                self._order = self._rng.permutation(len(self._samples))
                self._cursor = 0
            out.append(self._samples[self._order[self._cursor]])
            self._cursor += 1
        return out


class Sampler:
    """Deterministic stateful batch source; single-owner, not thread-safe."""

    def __init__(self, kind: SamplerKind, real: Optional[Dataset], synth: Optional[Dataset],
                 batch_size: int, seed: int):
        if batch_size <= 0:
            raise ValueError("batch_size must be positive")
        self.kind = kind
        self.batch_size = batch_size
        real_samples = real.samples if real is not None else ()
        synth_samples = synth.samples if synth is not None else ()

        root = np.random.SeedSequence(seed)
        real_seq, synth_seq, mix_seq = root.spawn(3)

        self._real_stream: Optional[_PoolStream] = None
        self._synth_stream: Optional[_PoolStream] = None
        self._mix_stream: Optional[_PoolStream] = None

        if kind is SamplerKind.REAL_ONLY:
            if not real_samples:
                raise EmptyPool("real pool is empty")
            self._real_stream = _PoolStream(real_samples, real_seq)
        elif kind is SamplerKind.SYNTH_ONLY:
            if not synth_samples:
                raise EmptyPool("synthetic pool is empty")
            self._synth_stream = _PoolStream(synth_samples, synth_seq)
        elif kind is SamplerKind.MIX:
            combined = real_samples + synth_samples
            if not combined:
                raise EmptyPool("combined pool is empty")
            self._mix_stream = _PoolStream(combined, mix_seq)
        elif kind is SamplerKind.BALANCED:
            if batch_size % 2 != 0:
                raise OddBatchForBalanced(f"balanced sampling needs an even batch, got {batch_size}")
            if not real_samples:
                raise EmptyPool("real pool is empty")
            if not synth_samples:
                raise EmptyPool("synthetic pool is empty")
            self._real_stream = _PoolStream(real_samples, real_seq)
            self._synth_stream = _PoolStream(synth_samples, synth_seq)
        else:
            raise ValueError(f"unknown sampler kind {kind}")

    def next_batch(self) -> Batch:
        if self.kind is SamplerKind.REAL_ONLY:
            return Batch(tuple(self._real_stream.take(self.batch_size)))
        if self.kind is SamplerKind.SYNTH_ONLY:
            return Batch(tuple(self._synth_stream.take(self.batch_size)))
        if self.kind is SamplerKind.MIX:
            return Batch(tuple(self._mix_stream.take(self.batch_size)))
        # Balanced: equal halves, interleaved real-first so downstream
        # pairing is order-stable.
        half = self.batch_size // 2
        reals = self._real_stream.take(half)
        synths = self._synth_stream.take(half)
        out: list[Sample] = []
        for r, s in zip(reals, synths):
            out.append(r)
            out.append(s)
        return Batch(tuple(out))


def make_sampler(
    strategy: SamplerKind | Strategy,
    real: Optional[Dataset],
    synth: Optional[Dataset],
    batch_size: int,
    seed: int,
) -> Sampler:
    kind = strategy.sampler_kind if isinstance(strategy, Strategy) else strategy
    return Sampler(kind, real, synth, batch_size, seed)


def next_batch(sampler: Sampler) -> Batch:
    return sampler.next_batch()
