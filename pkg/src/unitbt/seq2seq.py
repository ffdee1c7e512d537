"""A single-block Transformer encoder-decoder with training and decoding.

Used three ways: text -> reduced units (target-to-unit), reduced units -> text
(unit-to-target), and as the translation part of the speech model, where the
encoder consumes continuous features instead of token ids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import numcore as nc
from .errors import ContractError, DegenerateInputError, DimensionError
from .numcore import Tensor

EOS = 0
PAD = 1
NEG_INF = -1e9


class Vocab:
    """Symbol table with ``</s>`` at 0 and ``<pad>`` at 1."""

    def __init__(self, symbols: Iterable[str]):
        self.symbols = ["</s>", "<pad>"] + [s for s in symbols]
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ContractError("duplicate vocabulary symbols")

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.symbols == other.symbols

    @classmethod
    def for_units(cls, K: int) -> "Vocab":
        return cls(str(u) for u in range(K))

    @classmethod
    def from_texts(cls, texts: Iterable[Sequence[str]], extra: Iterable[str] = ()) -> "Vocab":
        seen = sorted({t for toks in texts for t in toks} | set(extra))
        return cls(seen)

    def encode(self, tokens: Sequence) -> list[int]:
        try:
            return [self.index[str(t)] for t in tokens]
        except KeyError as exc:
            raise ContractError(f"unknown symbol {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.symbols[i] for i in ids if i not in (EOS, PAD)]

    # unit vocabularies map unit u <-> id u + 2
    def encode_units(self, units: Sequence[int]) -> list[int]:
        return [int(u) + 2 for u in units]

    def decode_units(self, ids: Sequence[int]) -> list[int]:
        return [int(i) - 2 for i in ids if i not in (EOS, PAD)]


@lru_cache(maxsize=16)
def sinusoid_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, 2 * (i // 2) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]  # ends with EOS exactly once
    log_prob: float
    score: float


def length_penalized(log_prob: float, length: int, alpha: float) -> float:
    return log_prob / (length**alpha)


class Seq2Seq:
    """Pre-LN single-head encoder/decoder, one block each."""

    def __init__(
        self,
        src_vocab: int | None,
        tgt_vocab: int,
        dim: int = 64,
        ff_dim: int = 128,
        dropout_rate: float = 0.1,
        label_smoothing: float = 0.1,
        seed: int = 0,
    ):
        if not 0.0 <= dropout_rate < 1.0 or not 0.0 <= label_smoothing < 1.0:
            raise ContractError("dropout_rate and label_smoothing must lie in [0, 1)")
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.dim = dim
        self.ff_dim = ff_dim
        self.dropout_rate = dropout_rate
        self.label_smoothing = label_smoothing
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        if src_vocab is not None:
            self._emb("src_emb", src_vocab, rng)
        self._emb("tgt_emb", tgt_vocab, rng)
        self._ln("enc.ln1")
        self._attn("enc.self", rng)
        self._ln("enc.ln2")
        self._ffn("enc.ff", rng)
        self._ln("enc.ln_out")
        self._ln("dec.ln1")
        self._attn("dec.self", rng)
        self._ln("dec.ln2")
        self._attn("dec.cross", rng)
        self._ln("dec.ln3")
        self._ffn("dec.ff", rng)
        self._ln("dec.ln_out")
        self._dense("out", dim, tgt_vocab, rng)

    # -- parameter construction
    def _emb(self, name, n, rng):
        self.params[name] = nc.parameter(rng.normal(0.0, self.dim**-0.5, (n, self.dim)), name)

    def _ln(self, name):
        self.params[f"{name}.g"] = nc.parameter(np.ones(self.dim))
        self.params[f"{name}.b"] = nc.parameter(np.zeros(self.dim))

    def _dense(self, name, fan_in, fan_out, rng, bias=True):
        self.params[f"{name}.w"] = nc.parameter(rng.normal(0.0, fan_in**-0.5, (fan_in, fan_out)))
        if bias:
            self.params[f"{name}.b"] = nc.parameter(np.zeros(fan_out))

    def _attn(self, name, rng):
        for p in "qkvo":
            self._dense(f"{name}.{p}", self.dim, self.dim, rng, bias=False)

    def _ffn(self, name, rng):
        self._dense(f"{name}.1", self.dim, self.ff_dim, rng)
        self._dense(f"{name}.2", self.ff_dim, self.dim, rng)

    # -- state
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    # -- building blocks
    def _p(self, name) -> Tensor:
        return self.params[name]

    def _layernorm(self, x, name):
        return nc.layernorm(x, self._p(f"{name}.g"), self._p(f"{name}.b"))

    def _attention(self, x, mem, name, bias, rng):
        q = x @ self._p(f"{name}.q.w")
        k = mem @ self._p(f"{name}.k.w")
        v = mem @ self._p(f"{name}.v.w")
        scores = (q @ nc.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(self.dim)) + bias
        a = nc.dropout(nc.softmax(scores), self.dropout_rate, rng)
        return (a @ v) @ self._p(f"{name}.o.w")

    def _ffn_apply(self, x, name, rng):
        h = nc.relu(nc.linear(x, self._p(f"{name}.1.w"), self._p(f"{name}.1.b")))
        h = nc.dropout(h, self.dropout_rate, rng)
        return nc.linear(h, self._p(f"{name}.2.w"), self._p(f"{name}.2.b"))

    def embed_source(self, ids: np.ndarray) -> Tensor:
        if self.src_vocab is None:
            raise ContractError("this model takes continuous source features")
        x = nc.embedding(self._p("src_emb"), ids) * math.sqrt(self.dim)
        return x + sinusoid_table(max(ids.shape[1], 1), self.dim)[: ids.shape[1]]

    def encode(self, src: Tensor, src_mask: np.ndarray, rng=None) -> Tensor:
        """Encode embedded source ``(B, S, D)``; ``src_mask`` marks real positions."""
        bias = np.where(src_mask[:, None, :], 0.0, NEG_INF)
        x = nc.dropout(src, self.dropout_rate, rng)
        h = self._layernorm(x, "enc.ln1")
        x = x + nc.dropout(self._attention(h, h, "enc.self", bias, rng), self.dropout_rate, rng)
        h = self._layernorm(x, "enc.ln2")
        x = x + nc.dropout(self._ffn_apply(h, "enc.ff", rng), self.dropout_rate, rng)
        return self._layernorm(x, "enc.ln_out")

    def decode(self, memory: Tensor, src_mask: np.ndarray, tgt_in: np.ndarray, rng=None) -> Tensor:
        """Logits ``(B, T, V)`` for teacher-forced decoder input ``tgt_in``."""
        B, T = tgt_in.shape
        causal = np.triu(np.full((T, T), NEG_INF), k=1)[None]
        cross_bias = np.where(src_mask[:, None, :], 0.0, NEG_INF)
        x = nc.embedding(self._p("tgt_emb"), tgt_in) * math.sqrt(self.dim)
        x = nc.dropout(x + sinusoid_table(T, self.dim)[:T], self.dropout_rate, rng)
        h = self._layernorm(x, "dec.ln1")
        x = x + nc.dropout(self._attention(h, h, "dec.self", causal, rng), self.dropout_rate, rng)
        h = self._layernorm(x, "dec.ln2")
        x = x + nc.dropout(self._attention(h, memory, "dec.cross", cross_bias, rng), self.dropout_rate, rng)
        h = self._layernorm(x, "dec.ln3")
        x = x + nc.dropout(self._ffn_apply(h, "dec.ff", rng), self.dropout_rate, rng)
        x = self._layernorm(x, "dec.ln_out")
        return nc.linear(x, self._p("out.w"), self._p("out.b"))

    def batch_loss(self, src: Tensor, src_mask, targets: Sequence[Sequence[int]], rng=None, smoothing=None) -> Tensor:
        """Label-smoothed token-mean cross-entropy with teacher forcing."""
        if any(len(t) == 0 for t in targets):
            raise ContractError("targets must be non-empty")
        for t in targets:
            if max(t) >= self.tgt_vocab or min(t) < 0:
                raise ContractError(f"target id out of range [0, {self.tgt_vocab})")
        smoothing = self.label_smoothing if smoothing is None else smoothing
        gold, mask = pad_batch([list(t) + [EOS] for t in targets])
        tgt_in, _ = pad_batch([[EOS] + list(t) for t in targets])
        memory = self.encode(src, src_mask, rng)
        logits = self.decode(memory, src_mask, tgt_in, rng)
        return nc.smoothed_nll(logits, gold, mask, smoothing)

    def token_loss(self, sources: Sequence[Sequence[int]], targets, rng=None, smoothing=None) -> Tensor:
        ids, mask = pad_batch(sources)
        return self.batch_loss(self.embed_source(ids), mask, targets, rng, smoothing)

    def scorer(self, src: Tensor, src_mask: np.ndarray, rng=None) -> Callable[[np.ndarray], np.ndarray]:
        """Next-token log-prob function over prefixes for a single source."""
        with nc.no_grad():
            memory = self.encode(src, src_mask, rng)

        def step(prefixes: np.ndarray) -> np.ndarray:
            n = prefixes.shape[0]
            mem = Tensor(np.broadcast_to(memory.data, (n,) + memory.shape[1:]))
            mask = np.broadcast_to(src_mask, (n, src_mask.shape[1]))
            with nc.no_grad():
                logits = self.decode(mem, mask, prefixes, rng)
            return nc.log_softmax_np(logits.data[:, -1])

        return step

    def token_scorer(self, src_ids: Sequence[int], rng=None):
        ids = np.asarray([list(src_ids)], dtype=np.int64)
        if ids.shape[1] == 0:
            raise ContractError("empty source sequence")
        with nc.no_grad():
            emb = self.embed_source(ids)
        return self.scorer(emb, np.ones(ids.shape, dtype=bool), rng)


def ce_loss(model: Seq2Seq, src: Sequence[int], tgt: Sequence[int], smoothing: float | None = None) -> Tensor:
    """Cross-entropy of one (source, target) token pair."""
    return model.token_loss([list(src)], [list(tgt)], None, smoothing)


def default_max_len(src_len: int) -> int:
    return 3 * src_len + 8


# ---------------------------------------------------------------- decoding


def _restrict(lp: np.ndarray, t: int, max_len: int) -> np.ndarray:
    lp = lp.copy()
    lp[:, PAD] = -np.inf
    if t == max_len - 1:
        keep = lp[:, EOS].copy()
        lp[:] = -np.inf
        lp[:, EOS] = keep
    return lp


def greedy_search(step, max_len: int) -> Hypothesis:
    prefix = [EOS]
    logp = 0.0
    for t in range(max_len):
        lp = _restrict(step(np.asarray([prefix], dtype=np.int64)), t, max_len)[0]
        tok = int(np.argmax(lp))
        logp += float(lp[tok])
        prefix.append(tok)
        if tok == EOS:
            break
    toks = tuple(prefix[1:])
    return Hypothesis(toks, logp, logp)


def beam_search(step, beam: int, max_len: int, alpha: float = 1.0) -> list[Hypothesis]:
    """Beam search returning finished hypotheses, best first.

    Each step ranks the top ``2*beam`` expansions by cumulative log-prob.
    End-of-sequence candidates ranked within the top ``beam`` are finished and
    scored by ``log_prob / len**alpha``; the rest refill the active beam. The
    search stops once ``beam`` hypotheses have finished, nothing is active, or
    ``max_len`` is reached (the last step only allows end-of-sequence). The
    greedy hypothesis is added to the finished set before ranking.
    """
    if beam < 1:
        raise ContractError("beam must be >= 1")
    active: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[Hypothesis] = []
    for t in range(max_len):
        prefixes = np.asarray([[EOS] + list(p) for p, _ in active], dtype=np.int64)
        lp = _restrict(step(prefixes), t, max_len)
        cand = np.asarray([s for _, s in active])[:, None] + lp
        flat = cand.reshape(-1)
        order = np.argsort(-flat, kind="stable")[: 2 * beam]
        V = lp.shape[1]
        nxt = []
        for rank, idx in enumerate(order):
            score = flat[idx]
            if not np.isfinite(score):
                break
            row, tok = divmod(int(idx), V)
            toks = active[row][0] + (tok,)
            if tok == EOS:
                if rank < beam:
                    finished.append(Hypothesis(toks, float(score), length_penalized(float(score), len(toks), alpha)))
            elif len(nxt) < beam:
                nxt.append((toks, float(score)))
        active = nxt
        if len(finished) >= beam or not active:
            break
    # the greedy path is always a candidate, so the best hypothesis never
    # scores below greedy decoding under the same length penalty
    g = greedy_search(step, max_len)
    g = Hypothesis(g.tokens, g.log_prob, length_penalized(g.log_prob, len(g.tokens), alpha))
    if all(h.tokens != g.tokens for h in finished):
        finished.append(g)
    # stable sort keeps discovery order among equal scores
    return sorted(finished, key=lambda h: -h.score)


def sample_token(logp: np.ndarray, rng: np.random.Generator, top_k: int | None = None) -> int:
    probs = np.exp(logp - logp.max())
    if top_k is not None:
        if top_k < 1:
            raise ContractError("top_k must be >= 1")
        order = np.argsort(-logp, kind="stable")
        probs[order[top_k:]] = 0.0
    probs = probs / probs.sum()
    return int(rng.choice(probs.shape[0], p=probs))


def sample_search(step, max_len: int, rng: np.random.Generator, top_k: int | None = None) -> Hypothesis:
    prefix = [EOS]
    logp = 0.0
    for t in range(max_len):
        lp = _restrict(step(np.asarray([prefix], dtype=np.int64)), t, max_len)[0]
        tok = sample_token(lp, rng, top_k)
        logp += float(lp[tok])
        prefix.append(tok)
        if tok == EOS:
            break
    return Hypothesis(tuple(prefix[1:]), logp, logp)


def decode_greedy(model: Seq2Seq, src: Sequence[int], max_len: int | None = None) -> Hypothesis:
    max_len = default_max_len(len(src)) if max_len is None else max_len
    return greedy_search(model.token_scorer(src), max_len)


def decode_beam(
    model: Seq2Seq,
    src: Sequence[int],
    beam: int = 8,
    max_len: int | None = None,
    length_penalty: float = 1.0,
    dropout_on: bool = False,
    seed: int = 0,
    nbest: bool = False,
):
    """Best hypothesis (or the full sorted n-best list when ``nbest``)."""
    max_len = default_max_len(len(src)) if max_len is None else max_len
    rng = np.random.default_rng(seed) if dropout_on else None
    hyps = beam_search(model.token_scorer(src, rng), beam, max_len, length_penalty)
    return hyps if nbest else hyps[0]


def decode_sample(
    model: Seq2Seq, src: Sequence[int], max_len: int | None = None, top_k: int | None = None, seed: int = 0
) -> Hypothesis:
    max_len = default_max_len(len(src)) if max_len is None else max_len
    return sample_search(model.token_scorer(src), max_len, np.random.default_rng(seed), top_k)


def average_checkpoints(states: Sequence[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    if not states:
        raise ContractError("no checkpoints to average")
    keys = list(states[0])
    for s in states[1:]:
        if list(s) != keys:
            raise DimensionError("checkpoints have different parameter names")
        for k in keys:
            if np.shape(s[k]) != np.shape(states[0][k]):
                raise DimensionError(f"{k}: shape mismatch across checkpoints")
    return {k: sum(np.asarray(s[k], dtype=np.float64) for s in states) / len(states) for k in keys}


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    peak_lr: float = 3e-3
    warmup_steps: int = 100
    seed: int = 0
    keep_last: int = 1  # epoch checkpoints retained for averaging


@dataclass
class TrainResult:
    curve: list[float]
    checkpoints: list[dict[str, np.ndarray]] = field(default_factory=list)


def run_training(params: Mapping[str, Tensor], n_items: int, batch_loss, config: TrainConfig, on_epoch=None) -> TrainResult:
    """Generic Adam loop over shuffled mini-batches of item indices.

    ``batch_loss(indices, rng)`` returns a scalar loss tensor; the dropout
    generator ``rng`` and the shuffling order are both derived from
    ``config.seed``. ``on_epoch(epoch, params)`` runs after every epoch.
    """
    if n_items < 1:
        raise DegenerateInputError("cannot train on an empty corpus")
    state = nc.AdamState(peak_lr=config.peak_lr, warmup_steps=config.warmup_steps)
    order_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    curve: list[float] = []
    ckpts: list[dict[str, np.ndarray]] = []
    names = list(params)
    for _ in range(config.epochs):
        perm = order_rng.permutation(n_items)
        total, count = 0.0, 0
        for start in range(0, n_items, config.batch_size):
            idx = perm[start : start + config.batch_size]
            loss = batch_loss(idx, drop_rng)
            nc.backward(loss)
            grads = {k: params[k].grad for k in names}
            nc.adam_step(params, grads, state)
            nc.zero_grad(params.values())
            total += loss.item() * len(idx)
            count += len(idx)
        curve.append(total / count)
        if on_epoch is not None:
            on_epoch(len(curve), params)
        if config.keep_last > 0:
            ckpts.append({k: p.data.copy() for k, p in params.items()})
            ckpts = ckpts[-config.keep_last :]
    return TrainResult(curve, ckpts)


def train(model: Seq2Seq, pairs: Sequence[tuple[Sequence[int], Sequence[int]]], config: TrainConfig) -> TrainResult:
    """Train a token-to-token model in place on (source ids, target ids) pairs."""
    pairs = list(pairs)

    def batch_loss(idx, rng):
        return model.token_loss([pairs[i][0] for i in idx], [pairs[i][1] for i in idx], rng)

    return run_training(model.params, len(pairs), batch_loss, config)
