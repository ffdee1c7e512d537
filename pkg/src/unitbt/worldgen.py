"""A synthetic speech world with known ground truth.

Target sentences come from a seeded bigram model over ``vocab_size`` tokens.
Each token is pronounced as a fixed sequence of 1-3 units (plus random unit
insertions), each unit lasts a random number of frames, and each frame is
rendered as a unit-specific sinusoid scaled and shifted by the speaker.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from . import units as U
from .errors import ContractError, EmptyInputError

SPEAKER_DIM = 256


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") >> 1


@dataclass
class WorldSpec:
    vocab_size: int = 30
    unit_alphabet: int = 16
    max_units_per_token: int = 3
    insertion_noise: float = 0.05
    duration_mean_low: float = 3.0
    duration_mean_high: float = 5.0
    duration_std: float = 0.7
    min_sentence_len: int = 3
    max_sentence_len: int = 8
    bigram_concentration: float = 0.3
    speaker_count: int = 8
    samples_per_second: int = 16000
    wave_noise: float = 0.02
    seed: int = 1234

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise ContractError("vocab_size must be >= 1")
        if not 2 <= self.unit_alphabet <= U.FRAME // 2 - 2:
            raise ContractError(f"unit_alphabet must lie in [2, {U.FRAME // 2 - 2}]")
        if not 1 <= self.max_units_per_token <= 3:
            raise ContractError("max_units_per_token must lie in [1, 3]")
        if not 0.0 <= self.insertion_noise < 1.0:
            raise ContractError("insertion_noise must lie in [0, 1)")
        if self.duration_mean_low < 1.0 or self.duration_mean_high < self.duration_mean_low:
            raise ContractError("duration means must satisfy 1 <= low <= high")
        if not 1 <= self.min_sentence_len <= self.max_sentence_len:
            raise ContractError("sentence length bounds are invalid")
        if self.speaker_count < 1:
            raise ContractError("speaker_count must be >= 1")
        if self.wave_noise < 0:
            raise ContractError("wave_noise must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParallelRecord:
    id: str
    tokens: tuple[str, ...]
    units: np.ndarray
    reduced: U.ReducedUnits
    waveform: np.ndarray
    speaker: int
    provenance: str = "real"

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def token_name(i: int) -> str:
    return f"w{i:02d}"


def speaker_params(e: np.ndarray) -> tuple[float, float]:
    """Amplitude and DC offset implied by a speaker embedding."""
    e = np.asarray(e, dtype=np.float64)
    amp = float(np.clip(1.0 + 2.0 * e[0], 0.8, 1.2))
    offset = float(np.clip(2.0 * e[1], -0.15, 0.15))
    return amp, offset


def unit_frame(u: int) -> np.ndarray:
    """The noiseless 320-sample frame of unit ``u`` for a neutral speaker."""
    n = np.arange(U.FRAME)
    return np.cos(2 * np.pi * (u + 1) * n / U.FRAME + 0.7 * u)


def render_waveform(z, e, seed: int = 0, noise: float = 0.0) -> np.ndarray:
    """Render frame-rate units to float32 samples (320 per unit)."""
    z = np.asarray(z, dtype=np.int64)
    if z.size == 0:
        raise EmptyInputError("cannot render an empty unit sequence")
    amp, offset = speaker_params(e)
    n = np.arange(U.FRAME)
    phase = 2 * np.pi * (z[:, None] + 1) * n[None, :] / U.FRAME + 0.7 * z[:, None]
    wave = amp * np.cos(phase) + offset
    if noise > 0:
        wave = wave + noise * np.random.default_rng(seed).standard_normal(wave.shape)
    return wave.reshape(-1).astype(np.float32)


class World:
    """Holds the fixed random structure drawn from ``spec.seed``."""

    def __init__(self, spec: WorldSpec):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(derive_seed("world", spec.seed))
        V, K = spec.vocab_size, spec.unit_alphabet
        self.vocab = [token_name(i) for i in range(V)]
        self.start_probs = rng.dirichlet(np.full(V, 1.0))
        self.bigram = rng.dirichlet(np.full(V, spec.bigram_concentration), size=V)
        self.mapping = self._draw_mapping(rng, V, K, spec.max_units_per_token)
        self.duration_means = rng.uniform(spec.duration_mean_low, spec.duration_mean_high, size=K)
        spk = rng.standard_normal((spec.speaker_count, SPEAKER_DIM))
        self.speakers = spk / np.linalg.norm(spk, axis=1, keepdims=True)

    @staticmethod
    def _draw_mapping(rng, V, K, max_len) -> list[tuple[int, ...]]:
        seen: set[tuple[int, ...]] = set()
        out = []
        while len(out) < V:
            n = int(rng.integers(1, max_len + 1))
            seq = [int(rng.integers(K))]
            while len(seq) < n:
                u = int(rng.integers(K))
                if u != seq[-1]:
                    seq.append(u)
            t = tuple(seq)
            if t not in seen:
                seen.add(t)
                out.append(t)
        return out

    @cached_property
    def average_speaker(self) -> np.ndarray:
        return self.speakers.mean(axis=0)

    def oracle_codebook(self, dim: int = U.DEFAULT_FEATURE_DIM) -> U.KMeansCodebook:
        """Centroids from noiseless neutral-speaker renders of every unit."""
        rows = [U.extract_frames(unit_frame(u), dim)[0] for u in range(self.spec.unit_alphabet)]
        return U.KMeansCodebook(np.stack(rows))

    def sample_tokens(self, rng: np.random.Generator) -> tuple[str, ...]:
        s = self.spec
        length = int(rng.integers(s.min_sentence_len, s.max_sentence_len + 1))
        ids = [int(rng.choice(s.vocab_size, p=self.start_probs))]
        while len(ids) < length:
            ids.append(int(rng.choice(s.vocab_size, p=self.bigram[ids[-1]])))
        return tuple(self.vocab[i] for i in ids)

    def pronounce(self, tokens, rng: np.random.Generator) -> np.ndarray:
        """Frame-rate units for a token sequence: mapping + insertions + durations."""
        s = self.spec
        index = {t: i for i, t in enumerate(self.vocab)}
        reduced: list[int] = []
        for tok in tokens:
            reduced.extend(self.mapping[index[tok]])
            if s.insertion_noise > 0 and rng.random() < s.insertion_noise:
                reduced.append(int(rng.integers(s.unit_alphabet)))
        means = self.duration_means[reduced]
        durs = np.maximum(1, np.rint(rng.normal(means, s.duration_std)).astype(np.int64))
        return np.repeat(np.asarray(reduced, dtype=np.int64), durs)

    def make_record(self, rid: str, tokens=None) -> ParallelRecord:
        rng = np.random.default_rng(derive_seed(self.spec.seed, rid))
        if tokens is None:
            tokens = self.sample_tokens(rng)
        z = self.pronounce(tokens, rng)
        speaker = int(rng.integers(self.spec.speaker_count))
        wave = render_waveform(
            z, self.speakers[speaker], seed=derive_seed(self.spec.seed, rid, "wave"), noise=self.spec.wave_noise
        )
        return ParallelRecord(rid, tuple(tokens), z, U.reduce(z), wave, speaker)


def generate_corpus(spec: WorldSpec, n: int, split: str = "train") -> list[ParallelRecord]:
    """``n`` parallel records; a pure function of (spec, n, split)."""
    if n < 1:
        raise ContractError("generate_corpus needs n >= 1")
    world = World(spec)
    return [world.make_record(f"{split}-{i:06d}") for i in range(n)]


def make_monolingual(spec: WorldSpec, m: int, split: str = "mono") -> list[tuple[str, tuple[str, ...]]]:
    """``m`` (id, tokens) target-only sentences from the same text distribution."""
    if m < 0:
        raise ContractError("m must be >= 0")
    world = World(spec)
    out = []
    for i in range(m):
        rid = f"{split}-{i:06d}"
        rng = np.random.default_rng(derive_seed(spec.seed, rid))
        out.append((rid, world.sample_tokens(rng)))
    return out
