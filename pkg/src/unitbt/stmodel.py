"""End-task speech translation model and its two-stage training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from . import units as U
from .errors import ContractError, DegenerateInputError, EmptyInputError
from .numcore import Tensor
from .seq2seq import (
    EOS,
    Hypothesis,
    Seq2Seq,
    TrainConfig,
    average_checkpoints,
    beam_search,
    default_max_len,
    greedy_search,
    run_training,
    sinusoid_table,
)

ADAPTOR_KERNEL = 5
ADAPTOR_STRIDE = 2
ADAPTOR_PAD = 2


def conv_out_len(T: int) -> int:
    return (T + 2 * ADAPTOR_PAD - ADAPTOR_KERNEL) // ADAPTOR_STRIDE + 1


def adaptor_length(T: int) -> int:
    """Length after the two stride-2 convolutions: ceil(ceil(T/2)/2)."""
    return conv_out_len(conv_out_len(T))


@dataclass
class STExample:
    id: str
    features: np.ndarray  # (T, F) frame features
    target: list[int]
    provenance: str = "real"


class STModel:
    """Frame features -> linear projection -> 2x strided conv -> encoder/decoder."""

    def __init__(
        self,
        tgt_vocab: int,
        feature_dim: int = U.DEFAULT_FEATURE_DIM,
        dim: int = 64,
        ff_dim: int = 128,
        dropout_rate: float = 0.1,
        label_smoothing: float = 0.1,
        seed: int = 0,
    ):
        rng = np.random.default_rng([seed, 3])
        self.feature_dim = feature_dim
        self.dim = dim
        self.translator = Seq2Seq(None, tgt_vocab, dim, ff_dim, dropout_rate, label_smoothing, seed)
        k = ADAPTOR_KERNEL
        self.front = {
            "fe.w": nc.parameter(rng.normal(0, feature_dim**-0.5, (feature_dim, dim))),
            "fe.b": nc.parameter(np.zeros(dim)),
            "ad1.w": nc.parameter(rng.normal(0, (k * dim) ** -0.5, (k, dim, dim))),
            "ad1.b": nc.parameter(np.zeros(dim)),
            "ad2.w": nc.parameter(rng.normal(0, (k * dim) ** -0.5, (k, dim, dim))),
            "ad2.b": nc.parameter(np.zeros(dim)),
        }
        self.params: dict[str, Tensor] = {**self.front, **{f"tm.{k}": v for k, v in self.translator.params.items()}}

    @property
    def tgt_vocab(self) -> int:
        return self.translator.tgt_vocab

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state) -> None:
        for k, p in self.params.items():
            p.data = np.asarray(state[k], dtype=np.float64).copy()

    def adapt(self, features: Sequence[np.ndarray], rng=None) -> tuple[Tensor, np.ndarray]:
        """Project and shrink a batch of frame-feature matrices ``(T_i, F)``."""
        lens = [f.shape[0] for f in features]
        if min(lens) < 1:
            raise EmptyInputError("empty feature sequence")
        T = max(lens)
        x = np.zeros((len(features), T, self.feature_dim))
        for i, f in enumerate(features):
            x[i, : f.shape[0]] = f
        mask = np.arange(T)[None, :] < np.asarray(lens)[:, None]
        p = self.front
        h = nc.linear(Tensor(x), p["fe.w"], p["fe.b"]) * mask[..., None].astype(np.float64)
        for name in ("ad1", "ad2"):
            h = nc.relu(nc.conv1d(h, p[f"{name}.w"], p[f"{name}.b"], stride=ADAPTOR_STRIDE, padding=ADAPTOR_PAD))
            lens = [conv_out_len(n) for n in lens]
            mask = np.arange(h.shape[1])[None, :] < np.asarray(lens)[:, None]
            h = h * mask[..., None].astype(np.float64)
        S = h.shape[1]
        h = h * math.sqrt(self.dim) + sinusoid_table(S, self.dim)[:S]
        return h, mask

    def batch_loss(self, features, targets, rng=None, smoothing=None) -> Tensor:
        src, mask = self.adapt(features, rng)
        return self.translator.batch_loss(src, mask, targets, rng, smoothing)

    def scorer(self, features: np.ndarray, rng=None):
        with nc.no_grad():
            src, mask = self.adapt([features])
        return self.translator.scorer(src, mask, rng)


def st_forward(model: STModel, x, y_prefix: Sequence[int], feature_dim: int | None = None) -> np.ndarray:
    """Next-token distribution p(y_j | x, y_<j) for waveform ``x``."""
    feats = U.extract_frames(x, feature_dim or model.feature_dim)
    step = model.scorer(feats)
    lp = step(np.asarray([[EOS] + list(y_prefix)], dtype=np.int64))[0]
    return np.exp(lp)


def translate(model: STModel, features: np.ndarray, beam: int = 8, length_penalty: float = 1.0, max_len: int | None = None) -> Hypothesis:
    max_len = max_len or default_max_len(adaptor_length(features.shape[0]))
    step = model.scorer(features)
    if beam == 1:
        return greedy_search(step, max_len)
    return beam_search(step, beam, max_len, length_penalty)[0]


@dataclass
class TrainPlan:
    pretrain: list[STExample]
    finetune: list[STExample]
    pretrain_config: TrainConfig
    finetune_config: TrainConfig
    average_last: int = 10
    checkpoint_dir: Path | None = None


@dataclass
class TwoStageResult:
    pretrain_curve: list[float]
    finetune_curve: list[float]
    stage_boundary: int  # index into the concatenated curve where fine-tuning starts
    averaged: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def curve(self) -> list[float]:
        return self.pretrain_curve + self.finetune_curve


def _fit(model: STModel, rows: Sequence[STExample], config: TrainConfig, keep_last: int = 1, checkpoint_dir=None, stage: str = ""):
    rows = list(rows)
    cfg = TrainConfig(**{**config.__dict__, "keep_last": keep_last})

    def batch_loss(idx, rng):
        return model.batch_loss([rows[i].features for i in idx], [rows[i].target for i in idx], rng)

    on_epoch = None
    if checkpoint_dir is not None:
        d = Path(checkpoint_dir)

        def on_epoch(epoch, params):
            nc.save_checkpoint(d / f"{stage}_epoch{epoch:03d}.ubtc", params)

    return run_training(model.params, len(rows), batch_loss, cfg, on_epoch)


def train_st(model: STModel, rows: Sequence[STExample], config: TrainConfig, average_last: int = 10, checkpoint_dir=None) -> TwoStageResult:
    """Plain training on real rows, then load the average of the last epochs."""
    if len(rows) == 0:
        raise DegenerateInputError("real corpus is empty")
    _require(rows, "real", "fine-tuning")
    k = max(1, min(average_last, config.epochs))
    res = _fit(model, rows, config, keep_last=k, checkpoint_dir=checkpoint_dir, stage="finetune")
    avg = average_checkpoints(res.checkpoints)
    model.load_state_dict(avg)
    return TwoStageResult([], res.curve, 0, avg)


def _require(rows: Sequence[STExample], provenance: str, stage: str) -> None:
    bad = [r.id for r in rows if r.provenance != provenance]
    if bad:
        raise ContractError(f"{stage} received {len(bad)} non-{provenance} rows, e.g. {bad[0]}")


def two_stage_train(model: STModel, plan: TrainPlan) -> TwoStageResult:
    """Pre-train on selected synthetic rows (if any), then fine-tune on real rows."""
    if len(plan.finetune) == 0:
        raise DegenerateInputError("real corpus is empty")
    pre_curve: list[float] = []
    if plan.pretrain:
        _require(plan.pretrain, "synthetic", "pre-training")
        pre = _fit(model, plan.pretrain, plan.pretrain_config, keep_last=0, checkpoint_dir=plan.checkpoint_dir, stage="pretrain")
        pre_curve = pre.curve
    res = train_st(model, plan.finetune, plan.finetune_config, plan.average_last, plan.checkpoint_dir)
    return TwoStageResult(pre_curve, res.finetune_curve, len(pre_curve), res.averaged)
