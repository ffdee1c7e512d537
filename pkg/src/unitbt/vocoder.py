"""Unit-to-speech: duration predictor, speaker-conditioned generators, GAN losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from . import units as U
from . import worldgen
from .errors import ContractError, DimensionError, EmptyInputError
from .numcore import Tensor
from .seq2seq import TrainConfig, TrainResult, pad_batch, run_training

LAMBDA_FM = 2.0
LAMBDA_MEL = 45.0
MPD_PERIODS = (2, 3, 5, 7, 11)
MSD_SCALES = (1, 2, 4)
MEL_BINS = (1, 2, 4, 8, 16, 32, 64, 128)  # cycles per 320-sample window


def msle_duration_loss(d, d_star, mask=None) -> Tensor:
    """Mean squared logarithmic error between predicted and true durations."""
    d = nc.as_tensor(d)
    d_star = np.asarray(d_star, dtype=np.float64)
    if d.shape != d_star.shape:
        raise DimensionError(f"duration shapes differ: {d.shape} vs {d_star.shape}")
    if d.data.size == 0:
        raise EmptyInputError("no durations")
    err = nc.square(nc.log1p(d) - np.log1p(d_star))
    if mask is None:
        return nc.mean(err)
    mask = np.asarray(mask, dtype=np.float64)
    return nc.sum_(err * mask) * (1.0 / mask.sum())


def durations_from_log(o) -> np.ndarray:
    """round(max(exp(o) - 1, 0)), clamped to >= 1."""
    o = np.asarray(o, dtype=np.float64)
    return np.maximum(np.rint(np.maximum(np.exp(o) - 1.0, 0.0)), 1).astype(np.int64)


class DurationPredictor:
    """conv(k3) -> ReLU -> LN -> dropout, twice, then a linear map to one scalar.

    The scalar is read as log(1 + d), so ``exp(o) - 1`` is the predicted duration.
    """

    def __init__(self, in_dim: int, hidden: int = 256, dropout_rate: float = 0.1, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dropout_rate = dropout_rate
        self.params = {
            "conv1.w": nc.parameter(rng.normal(0, (3 * in_dim) ** -0.5, (3, in_dim, hidden))),
            "conv1.b": nc.parameter(np.zeros(hidden)),
            "ln1.g": nc.parameter(np.ones(hidden)),
            "ln1.b": nc.parameter(np.zeros(hidden)),
            "conv2.w": nc.parameter(rng.normal(0, (3 * hidden) ** -0.5, (3, hidden, hidden))),
            "conv2.b": nc.parameter(np.zeros(hidden)),
            "ln2.g": nc.parameter(np.ones(hidden)),
            "ln2.b": nc.parameter(np.zeros(hidden)),
            "proj.w": nc.parameter(rng.normal(0, hidden**-0.5, (hidden, 1))),
            "proj.b": nc.parameter(np.full(1, math.log(5.0))),
        }

    def forward(self, emb: Tensor, mask: np.ndarray, rng=None) -> Tensor:
        p = self.params
        m = mask[..., None].astype(np.float64)
        h = emb * m
        for i in (1, 2):
            h = nc.conv1d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], padding=1)
            h = nc.layernorm(nc.relu(h), p[f"ln{i}.g"], p[f"ln{i}.b"])
            h = nc.dropout(h, self.dropout_rate, rng) * m
        out = nc.linear(h, p["proj.w"], p["proj.b"])
        return nc.reshape(out, mask.shape)


def predict_durations(dp: DurationPredictor, unit_embeddings) -> np.ndarray:
    emb = np.asarray(unit_embeddings.data if isinstance(unit_embeddings, Tensor) else unit_embeddings)
    if emb.shape[0] == 0:
        raise EmptyInputError("no units to time")
    with nc.no_grad():
        o = dp.forward(Tensor(emb[None]), np.ones((1, emb.shape[0]), dtype=bool))
    return durations_from_log(o.data[0])


# ---------------------------------------------------------------- spectral stand-in


def _mel_bank() -> tuple[np.ndarray, np.ndarray]:
    n = np.arange(U.FRAME)[:, None]
    f = np.asarray(MEL_BINS)[None, :]
    ang = 2 * np.pi * f * n / U.FRAME
    return np.cos(ang) / U.FRAME, np.sin(ang) / U.FRAME


_COS, _SIN = _mel_bank()


def mel_stub(x) -> Tensor:
    """Per-window log magnitude of an 8-bin fixed Fourier bank: ``(..., T, 8)``."""
    x = nc.as_tensor(x)
    I = x.shape[-1]
    T = I // U.FRAME
    if T < 1:
        raise EmptyInputError(f"need at least {U.FRAME} samples, got {I}")
    if I != T * U.FRAME:
        x = nc.getitem(x, (..., slice(0, T * U.FRAME)))
    win = nc.reshape(x, x.shape[:-1] + (T, U.FRAME))
    power = nc.square(win @ _COS) + nc.square(win @ _SIN)
    return nc.log(power + 1e-5) * 0.5


# ---------------------------------------------------------------- discriminators


class SubDiscriminator:
    """Small conv stack; returns a per-sample score and every layer's features."""

    def __init__(self, kind: str, factor: int, rng: np.random.Generator, channels=(4, 8)):
        self.kind = kind  # "period" or "scale"
        self.factor = factor
        if kind == "period":
            layers = [(5, 1, channels[0], 3, 2), (5, channels[0], channels[1], 3, 2), (3, channels[1], 1, 1, 1)]
        else:
            layers = [(15, 1, channels[0], 1, 7), (9, channels[0], channels[1], 4, 4), (3, channels[1], 1, 1, 1)]
        self.layers = layers
        self.params = {}
        for i, (k, cin, cout, _, _) in enumerate(layers):
            self.params[f"{kind}{factor}.l{i}.w"] = nc.parameter(rng.normal(0, (k * cin) ** -0.5, (k, cin, cout)))
            self.params[f"{kind}{factor}.l{i}.b"] = nc.parameter(np.zeros(cout))

    def _prepare(self, x: Tensor) -> Tensor:
        B, I = x.shape
        f = self.factor
        if self.kind == "period":
            n = -(-I // f) * f
            if n != I:
                x = nc.concat([x, Tensor(np.zeros((B, n - I)))], axis=1)
            cols = nc.reshape(x, (B, n // f, f))
            return nc.reshape(nc.transpose(cols, (0, 2, 1)), (B * f, n // f, 1))
        if f > 1:
            n = (I // f) * f
            x = nc.mean(nc.reshape(nc.getitem(x, (slice(None), slice(0, n))), (B, n // f, f)), axis=2)
        return nc.reshape(x, (B, x.shape[1], 1))

    def __call__(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        B = x.shape[0]
        h = self._prepare(x)
        feats = []
        for i, (k, _, _, stride, pad) in enumerate(self.layers):
            h = nc.conv1d(h, self.params[f"{self.kind}{self.factor}.l{i}.w"], self.params[f"{self.kind}{self.factor}.l{i}.b"], stride=stride, padding=pad)
            if i < len(self.layers) - 1:
                h = nc.leaky_relu(h)
            feats.append(h)
        score = nc.mean(nc.reshape(h, (B, -1)), axis=1)
        return score, feats


class DiscriminatorBank:
    """Five period discriminators and three scale discriminators."""

    def __init__(self, seed: int = 0, periods=MPD_PERIODS, scales=MSD_SCALES):
        rng = np.random.default_rng(seed)
        self.members = [SubDiscriminator("period", p, rng) for p in periods]
        self.members += [SubDiscriminator("scale", s, rng) for s in scales]
        self.params = {k: v for m in self.members for k, v in m.params.items()}

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


def _feature_l1(real: Tensor, fake: Tensor) -> Tensor:
    # (1/N_i) * ||.||_1 per sample, averaged over the batch, is the global mean
    return nc.mean(nc.abs_(real - fake))


def mel_l1_loss(x_hat: Tensor, x: Tensor) -> Tensor:
    """L1 distance of the spectral stand-in, summed per sample and averaged over the batch."""
    return nc.sum_(nc.abs_(mel_stub(x) - mel_stub(x_hat))) * (1.0 / x.shape[0])


def gan_losses(x_hat, x, bank, lambda_fm: float = LAMBDA_FM, lambda_mel: float = LAMBDA_MEL) -> dict:
    """All generator/discriminator objectives for a batch ``(B, I)``.

    Expectations are batch means. Returns per-member lists under
    ``adv_g``, ``adv_d``, ``fm`` plus scalars ``mel``, ``G`` and ``D``.
    """
    x_hat = nc.as_tensor(x_hat)
    x = nc.as_tensor(x)
    if x_hat.shape != x.shape:
        raise DimensionError(f"generated {x_hat.shape} and real {x.shape} differ in shape")
    if x.ndim == 1:
        x_hat, x = nc.reshape(x_hat, (1, -1)), nc.reshape(x, (1, -1))
    B = x.shape[0]
    adv_g, adv_d, fm = [], [], []
    for disc in bank:
        real_score, real_feats = disc(x)
        fake_score, fake_feats = disc(x_hat)
        adv_g.append(nc.mean(nc.square(1.0 - fake_score)))
        adv_d.append(nc.mean(nc.square(1.0 - real_score) + nc.square(fake_score)))
        terms = [_feature_l1(r, f) for r, f in zip(real_feats, fake_feats)]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        fm.append(total)
    mel = mel_l1_loss(x_hat, x)
    G = mel * lambda_mel
    for a, f in zip(adv_g, fm):
        G = G + a + f * lambda_fm
    D = adv_d[0]
    for a in adv_d[1:]:
        D = D + a
    return {"adv_g": adv_g, "adv_d": adv_d, "fm": fm, "mel": mel, "G": G, "D": D}


# ---------------------------------------------------------------- generators


class WorldRendererGenerator:
    """Exact backend: nearest embedding row -> world unit -> world renderer.

    ``unit_map[k]`` is the world unit whose noiseless render best matches the
    frames that were quantized to cluster ``k``.
    """

    def __init__(self, table: np.ndarray, unit_map: Sequence[int], noise: float = 0.0):
        self.table = np.asarray(table, dtype=np.float64)
        self.unit_map = np.asarray(unit_map, dtype=np.int64)
        self.noise = noise

    def __call__(self, features: np.ndarray, seed: int = 0) -> np.ndarray:
        emb_dim = self.table.shape[1]
        emb, spk = features[:, :emb_dim], features[0, emb_dim:]
        ids = U._assign(emb, self.table)
        return worldgen.render_waveform(self.unit_map[ids], spk, seed=seed, noise=self.noise)


def fit_unit_map(frames_by_record: Sequence[np.ndarray], units_by_record: Sequence[np.ndarray], K: int, n_world_units: int) -> np.ndarray:
    """Map each cluster id to the world unit nearest its mean training frame."""
    dim = frames_by_record[0].shape[1]
    refs = np.stack([U.extract_frames(worldgen.unit_frame(u), dim)[0] for u in range(n_world_units)])
    X = np.concatenate(frames_by_record)
    z = np.concatenate(units_by_record)
    out = np.zeros(K, dtype=np.int64)
    for k in range(K):
        members = X[z == k]
        if members.shape[0] == 0:
            out[k] = k % n_world_units
            continue
        out[k] = int(U._assign(members.mean(axis=0)[None], refs)[0])
    return out


class ConvGenerator:
    """Miniature upsampling generator: frame features -> 320 samples per frame."""

    def __init__(self, in_dim: int, hidden: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params = {
            "gen.in.w": nc.parameter(rng.normal(0, in_dim**-0.5, (in_dim, hidden))),
            "gen.in.b": nc.parameter(np.zeros(hidden)),
            "gen.conv.w": nc.parameter(rng.normal(0, (3 * hidden) ** -0.5, (3, hidden, hidden))),
            "gen.conv.b": nc.parameter(np.zeros(hidden)),
            "gen.up.w": nc.parameter(rng.normal(0, hidden**-0.5, (hidden, U.FRAME))),
            "gen.up.b": nc.parameter(np.zeros(U.FRAME)),
        }

    def forward(self, features: Tensor) -> Tensor:
        p = self.params
        h = nc.relu(nc.linear(features, p["gen.in.w"], p["gen.in.b"]))
        h = nc.relu(nc.conv1d(h, p["gen.conv.w"], p["gen.conv.b"], padding=1))
        out = nc.linear(h, p["gen.up.w"], p["gen.up.b"])
        B, T = features.shape[:2]
        return nc.reshape(out, (B, T * U.FRAME))

    def __call__(self, features: np.ndarray, seed: int = 0) -> np.ndarray:
        with nc.no_grad():
            y = self.forward(Tensor(features[None]))
        return y.data[0].astype(np.float32)


# ---------------------------------------------------------------- the unit-to-speech model


class UnitToSpeech:
    """Unit embedding table + duration predictor + speaker table + generator."""

    def __init__(self, K: int, emb_dim: int = 32, dp_hidden: int = 256, dropout_rate: float = 0.1, seed: int = 0):
        rng = np.random.default_rng([seed, 7])
        self.K = K
        self.table = nc.parameter(rng.normal(0, 1.0, (K, emb_dim)), "unit_table")
        self.dp = DurationPredictor(emb_dim, dp_hidden, dropout_rate, seed)
        self.speakers: np.ndarray | None = None
        self.generator: Callable[[np.ndarray, int], np.ndarray] | None = None

    @property
    def params(self) -> dict[str, Tensor]:
        return {"unit_table": self.table, **{f"dp.{k}": v for k, v in self.dp.params.items()}}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        if self.speakers is not None:
            out.update({f"speaker.{i}": e for i, e in enumerate(self.speakers)})
        return out

    def load_state_dict(self, state) -> None:
        for k, p in self.params.items():
            p.data = np.asarray(state[k], dtype=np.float64).copy()
        spk = sorted((int(k.split(".")[1]), v) for k, v in state.items() if k.startswith("speaker."))
        self.speakers = np.stack([v for _, v in spk]) if spk else None

    def _embed(self, units_batch: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray]:
        ids, mask = pad_batch(units_batch, pad=0)
        return nc.embedding(self.table, ids), mask

    def fit_durations(self, pairs: Sequence[tuple[Sequence[int], Sequence[int]]], config: TrainConfig) -> TrainResult:
        """Train table + predictor on (reduced units, true durations) with MSLE."""
        pairs = list(pairs)

        def batch_loss(idx, rng):
            emb, mask = self._embed([pairs[i][0] for i in idx])
            d_star, _ = pad_batch([pairs[i][1] for i in idx], pad=1)
            o = self.dp.forward(emb, mask, rng)
            return msle_duration_loss(nc.exp(o) - 1.0, d_star, mask)

        return run_training(self.params, len(pairs), batch_loss, config)

    def predict_durations(self, units: Sequence[int]) -> np.ndarray:
        ids = np.asarray(units, dtype=np.int64)
        if ids.size == 0:
            raise EmptyInputError("no units to time")
        if ids.max() >= self.K or ids.min() < 0:
            raise ContractError("unit id out of range")
        return predict_durations(self.dp, self.table.data[ids])

    def average_speaker(self) -> np.ndarray:
        return self.speakers.mean(axis=0)

    def synthesize(self, units: Sequence[int], e_spkr, durations=None, seed: int = 0) -> np.ndarray:
        """Waveform for reduced units; ``durations=None`` uses the predictor."""
        if self.generator is None:
            raise ContractError("no generator attached")
        units = np.asarray(units, dtype=np.int64)
        if durations is None:
            durations = self.predict_durations(units)
        z = U.expand(units, durations)
        e = np.asarray(e_spkr, dtype=np.float64)
        feats = np.concatenate([self.table.data[z], np.broadcast_to(e, (z.shape[0], e.shape[0]))], axis=1)
        return self.generator(feats, seed)


def train_gan(
    generator: ConvGenerator,
    bank: DiscriminatorBank,
    batches: Sequence[tuple[np.ndarray, np.ndarray]],
    steps: int,
    lr: float = 2e-4,
    seed: int = 0,
) -> list[dict]:
    """Alternate discriminator and generator updates over (features, waveform) batches."""
    g_state = nc.AdamState(peak_lr=lr, warmup_steps=0, beta1=0.8, beta2=0.99, schedule="constant")
    d_state = nc.AdamState(peak_lr=lr, warmup_steps=0, beta1=0.8, beta2=0.99, schedule="constant")
    history = []
    for step in range(steps):
        feats, wave = batches[step % len(batches)]
        x_hat = generator.forward(Tensor(feats))
        detached = Tensor(x_hat.data)
        d_losses = gan_losses(detached, wave, bank)
        nc.backward(d_losses["D"])
        nc.adam_step(bank.params, {k: p.grad for k, p in bank.params.items()}, d_state)
        nc.zero_grad(bank.params.values())
        g_losses = gan_losses(x_hat, wave, bank)
        nc.backward(g_losses["G"])
        nc.adam_step(generator.params, {k: p.grad for k, p in generator.params.items()}, g_state)
        nc.zero_grad(generator.params.values())
        nc.zero_grad(bank.params.values())
        history.append({"G": g_losses["G"].item(), "D": d_losses["D"].item(), "mel": g_losses["mel"].item()})
    return history
