"""Back translation for speech translation, end to end, over a workspace directory.

Stage order: world -> units -> auxiliary models -> synthesize -> select ->
speech translation training -> evaluation. Each stage reads only artifacts of
earlier stages from the workspace and writes its own.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics as M
from . import numcore as nc
from . import seq2seq as S
from . import stmodel as ST
from . import units as U
from . import vocoder as VC
from . import worldgen as W
from .config import PipelineConfig
from .errors import ContractError, DataError
from .manifest import Row, file_hash, load_row_audio, read_manifest, write_audio, write_manifest

log = logging.getLogger(__name__)

STAGES = ("world", "units", "aux", "synthesize", "select", "train_st", "evaluate")


class StageError(Exception):
    """Wraps a failure with the name of the stage it happened in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    # fixed artifact locations
    @property
    def train(self):
        return self.path("world", "train.jsonl")

    @property
    def test(self):
        return self.path("world", "test.jsonl")

    @property
    def mono(self):
        return self.path("world", "mono.jsonl")

    @property
    def speakers(self):
        return self.path("world", "speakers.ubtc")

    @property
    def codebook(self):
        return self.path("units", "codebook.ubtc")

    @property
    def train_reduced(self):
        return self.path("units", "train_reduced.jsonl")

    @property
    def test_reduced(self):
        return self.path("units", "test_reduced.jsonl")

    def model(self, name: str) -> Path:
        return self.path("models", f"{name}.ubtc")

    def synthetic(self, tag: str = "") -> Path:
        return self.path("synth", f"synthetic{tag}.jsonl")

    def selected(self, tag: str = "") -> Path:
        return self.path("select", f"selected{tag}.jsonl")

    def st_model(self, tag: str = "") -> Path:
        return self.path("st", f"st{tag}.ubtc")


def text_vocab(cfg: PipelineConfig) -> S.Vocab:
    return S.Vocab(W.token_name(i) for i in range(cfg.world.vocab_size))


def unit_vocab(cfg: PipelineConfig) -> S.Vocab:
    return S.Vocab.for_units(cfg.K)


def stage_seed(cfg: PipelineConfig, *parts) -> int:
    return W.derive_seed(cfg.seed, *parts)


# ---------------------------------------------------------------- stage: world


def records_to_rows(records: Sequence[W.ParallelRecord], audio_dir: str, ws: Workspace, base: Path) -> list[Row]:
    rows = []
    for r in records:
        rel = f"{audio_dir}/{r.id}.f32"
        write_audio(base / rel, r.waveform)
        rows.append(Row(r.id, r.text, "real", audio=rel, speaker=r.speaker))
    return rows


def gen_world(cfg: PipelineConfig, ws: Workspace) -> dict:
    """Write the real train/test corpora (with audio), monolingual text and speakers."""
    base = ws.path("world")
    train = W.generate_corpus(cfg.world, cfg.n_train, "train")
    test = W.generate_corpus(cfg.world, cfg.n_test, "test")
    write_manifest(ws.train, records_to_rows(train, "audio", ws, base))
    write_manifest(ws.test, records_to_rows(test, "audio", ws, base))
    mono = W.make_monolingual(cfg.world, cfg.n_mono)
    write_manifest(ws.mono, [Row(rid, " ".join(toks), "real") for rid, toks in mono])
    world = W.World(cfg.world)
    nc.save_checkpoint(ws.speakers, {f"speaker.{i}": e for i, e in enumerate(world.speakers)})
    return {"train": len(train), "test": len(test), "mono": len(mono)}


def load_speakers(ws: Workspace) -> np.ndarray:
    arrays = nc.load_checkpoint(ws.speakers)
    return np.stack([arrays[f"speaker.{i}"] for i in range(len(arrays))])


# ---------------------------------------------------------------- stage: units


def row_features(row: Row, base_dir, dim: int) -> np.ndarray:
    return U.extract_frames(load_row_audio(row, base_dir), dim)


def fit_codebook(rows: Sequence[Row], base_dir, cfg: PipelineConfig) -> U.KMeansCodebook:
    frames = np.concatenate([row_features(r, base_dir, cfg.feature_dim) for r in rows])
    return U.kmeans_fit(frames, cfg.K, cfg.kmeans_iters, seed=stage_seed(cfg, "kmeans"))


def build_reduced_corpus(rows: Sequence[Row], base_dir, codebook: U.KMeansCodebook, feature_dim: int | None = None) -> list[Row]:
    """Attach frame units, reduced units and durations to every row with audio."""
    dim = feature_dim or codebook.dim
    out = []
    for r in rows:
        z = U.quantize(row_features(r, base_dir, dim), codebook)
        red = U.reduce(z)
        out.append(
            Row(
                r.id,
                r.y,
                r.provenance,
                z=[int(u) for u in z],
                z_reduced=list(red.units),
                durations=list(red.durations),
                audio=r.audio,
                speaker=r.speaker,
            )
        )
    return out


def quantize_stage(cfg: PipelineConfig, ws: Workspace) -> dict:
    base = ws.path("world")
    train = read_manifest(ws.train)
    codebook = fit_codebook(train, base, cfg)
    codebook.save(ws.codebook)
    # audio paths stay relative to the world directory
    write_manifest(ws.train_reduced, _rebase(build_reduced_corpus(train, base, codebook), "../world"))
    write_manifest(ws.test_reduced, _rebase(build_reduced_corpus(read_manifest(ws.test), base, codebook), "../world"))
    return {"K": codebook.K}


def _rebase(rows: list[Row], prefix: str) -> list[Row]:
    for r in rows:
        if r.audio is not None:
            r.audio = f"{prefix}/{r.audio}"
    return rows


# ---------------------------------------------------------------- stage: auxiliary models


def _aux_train_config(cfg: PipelineConfig, name: str) -> S.TrainConfig:
    return S.TrainConfig(
        epochs=cfg.aux_epochs,
        batch_size=cfg.aux_batch,
        peak_lr=cfg.aux_lr,
        warmup_steps=cfg.aux_warmup,
        seed=stage_seed(cfg, name, "train"),
    )


def new_t2u(cfg: PipelineConfig) -> S.Seq2Seq:
    return S.Seq2Seq(len(text_vocab(cfg)), len(unit_vocab(cfg)), cfg.model_dim, cfg.ff_dim, cfg.aux_dropout, cfg.label_smoothing, stage_seed(cfg, "t2u", "init"))


def new_u2t(cfg: PipelineConfig) -> S.Seq2Seq:
    return S.Seq2Seq(len(unit_vocab(cfg)), len(text_vocab(cfg)), cfg.model_dim, cfg.ff_dim, cfg.aux_dropout, cfg.label_smoothing, stage_seed(cfg, "u2t", "init"))


def new_u2s(cfg: PipelineConfig) -> VC.UnitToSpeech:
    return VC.UnitToSpeech(cfg.K, cfg.unit_emb_dim, cfg.dp_hidden, cfg.aux_dropout, stage_seed(cfg, "u2s", "init"))


def _unit_text_pairs(cfg, rows: Sequence[Row]):
    tv, uv = text_vocab(cfg), unit_vocab(cfg)
    return [(tv.encode(r.tokens), uv.encode_units(r.z_reduced)) for r in rows]


def train_t2u(cfg: PipelineConfig, ws: Workspace) -> list[float]:
    rows = read_manifest(ws.train_reduced)
    model = new_t2u(cfg)
    res = S.train(model, _unit_text_pairs(cfg, rows), _aux_train_config(cfg, "t2u"))
    nc.save_checkpoint(ws.model("t2u"), model.state_dict())
    return res.curve


def train_u2t(cfg: PipelineConfig, ws: Workspace) -> list[float]:
    rows = read_manifest(ws.train_reduced)
    model = new_u2t(cfg)
    res = S.train(model, [(u, y) for y, u in _unit_text_pairs(cfg, rows)], _aux_train_config(cfg, "u2t"))
    nc.save_checkpoint(ws.model("u2t"), model.state_dict())
    return res.curve


def train_u2s(cfg: PipelineConfig, ws: Workspace) -> list[float]:
    """Duration predictor (MSLE), speaker table and the renderer's unit map."""
    rows = read_manifest(ws.train_reduced)
    model = new_u2s(cfg)
    res = model.fit_durations([(r.z_reduced, r.durations) for r in rows], _aux_train_config(cfg, "u2s"))
    base = ws.train_reduced.parent
    frames = [row_features(r, base, cfg.feature_dim) for r in rows]
    unit_map = VC.fit_unit_map(frames, [np.asarray(r.z) for r in rows], cfg.K, cfg.world.unit_alphabet)
    all_speakers = load_speakers(ws)
    used = sorted({r.speaker for r in rows if r.speaker is not None})
    state = model.state_dict()
    state.update({f"speaker.{i}": all_speakers[i] for i in used})
    state["generator.unit_map"] = unit_map.astype(np.float64)
    state["generator.noise"] = np.asarray(cfg.world.wave_noise)
    nc.save_checkpoint(ws.model("u2s"), state)
    return res.curve


@dataclass
class AuxModels:
    text_vocab: S.Vocab
    unit_vocab: S.Vocab
    t2u: S.Seq2Seq
    u2t: S.Seq2Seq
    u2s: VC.UnitToSpeech
    speaker_ids: list[int] = field(default_factory=list)


def load_aux(cfg: PipelineConfig, ws: Workspace) -> AuxModels:
    t2u, u2t, u2s = new_t2u(cfg), new_u2t(cfg), new_u2s(cfg)
    t2u.load_state_dict(nc.load_checkpoint(ws.model("t2u")))
    u2t.load_state_dict(nc.load_checkpoint(ws.model("u2t")))
    state = nc.load_checkpoint(ws.model("u2s"))
    speaker_ids = sorted(int(k.split(".")[1]) for k in state if k.startswith("speaker."))
    u2s.load_state_dict({k: v for k, v in state.items() if not k.startswith("speaker.")})
    u2s.speakers = np.stack([state[f"speaker.{i}"] for i in speaker_ids])
    u2s.generator = VC.WorldRendererGenerator(
        u2s.table.data, state["generator.unit_map"].astype(np.int64), float(state["generator.noise"])
    )
    return AuxModels(text_vocab(cfg), unit_vocab(cfg), t2u, u2t, u2s, speaker_ids)


# ---------------------------------------------------------------- stage: synthesize


def generate_units(aux: AuxModels, tokens: Sequence[str], method: str, beam: int, top_k: int, alpha: float, seed: int, dropout_on: bool = False) -> list[int]:
    src = aux.text_vocab.encode(tokens)
    if method == "beam":
        h = S.decode_beam(aux.t2u, src, beam=beam, length_penalty=alpha, dropout_on=dropout_on, seed=seed)
    elif method == "greedy":
        h = S.decode_greedy(aux.t2u, src)
    elif method == "topk":
        h = S.decode_sample(aux.t2u, src, top_k=top_k, seed=seed)
    elif method == "sample":
        h = S.decode_sample(aux.t2u, src, top_k=None, seed=seed)
    else:
        raise ContractError(f"unknown generation method {method!r}")
    units = aux.unit_vocab.decode_units(h.tokens)
    # sampled sequences may repeat a unit; the stored form is always reduced
    return list(U.reduce(units).units) if units else []


@dataclass
class SynthesisResult:
    rows: list[Row]
    skipped: list[str]


def synthesize_bt(
    mono: Sequence[Row],
    aux: AuxModels,
    cfg: PipelineConfig,
    out_dir,
    tag: str = "",
    dropout_seed: int | None = None,
) -> SynthesisResult:
    """Decode units for every target sentence, time them, pick a speaker, render audio.

    ``dropout_seed`` switches on dropout during beam decoding (diverse mode).
    """
    out_dir = Path(out_dir)
    rows, skipped = [], []
    avg = aux.u2s.average_speaker()
    method = "beam" if dropout_seed is not None else cfg.generation
    for r in sorted(mono, key=lambda r: r.id):
        row_seed = stage_seed(cfg, "synth", tag, r.id)
        units = generate_units(
            aux, r.tokens, method, cfg.beam, cfg.top_k, cfg.length_penalty,
            seed=row_seed if dropout_seed is None else stage_seed(cfg, "diverse", dropout_seed, r.id),
            dropout_on=dropout_seed is not None,
        )
        if not units:
            log.warning("row %s: target-to-unit produced an empty sequence; skipped", r.id)
            skipped.append(r.id)
            continue
        rng = np.random.default_rng(row_seed)
        if cfg.speaker_mode == "multi":
            k = int(rng.integers(len(aux.speaker_ids)))
            speaker, emb = aux.speaker_ids[k], aux.u2s.speakers[k]
        else:
            speaker, emb = -1, avg
        durations = aux.u2s.predict_durations(units)
        wave = aux.u2s.synthesize(units, emb, durations=durations, seed=row_seed)
        rel = f"audio{tag}/{r.id}.f32"
        write_audio(out_dir / rel, wave)
        rows.append(Row(r.id, r.y, "synthetic", z_reduced=units, durations=[int(d) for d in durations], audio=rel, speaker=speaker))
    return SynthesisResult(rows, skipped)


def synthesize_stage(cfg: PipelineConfig, ws: Workspace, tag: str = "", dropout_seed: int | None = None) -> SynthesisResult:
    aux = load_aux(cfg, ws)
    res = synthesize_bt(read_manifest(ws.mono), aux, cfg, ws.path("synth"), tag, dropout_seed)
    write_manifest(ws.synthetic(tag), res.rows)
    ws.path("synth", f"skipped{tag}.json").write_text(json.dumps(res.skipped))
    return res


def diverse_bt(cfg: PipelineConfig, ws: Workspace, seeds: Sequence[int]) -> list[Path]:
    """One synthetic manifest per seed, using dropout-perturbed beam decoding."""
    if len(seeds) < 1:
        raise ContractError("diverse_bt needs at least one seed")
    if len(set(seeds)) != len(seeds):
        warnings.warn("duplicate diverse seeds produce identical manifests", stacklevel=2)
    paths = []
    for s in seeds:
        synthesize_stage(cfg, ws, tag=f"_div{s}", dropout_seed=s)
        paths.append(ws.synthetic(f"_div{s}"))
    return paths


# ---------------------------------------------------------------- stage: select


def round_trip_scores(rows: Sequence[Row], aux: AuxModels) -> list[float]:
    """Sentence BLEU of unit-to-target greedy output against each row's text."""
    scores = []
    for r in rows:
        h = S.decode_greedy(aux.u2t, aux.unit_vocab.encode_units(r.z_reduced))
        hyp = aux.text_vocab.decode(h.tokens)
        scores.append(M.bleu(hyp, r.tokens, smoothing="exp", effective_order=True).score)
    return scores


def select_data(rows: Sequence[Row], aux: AuxModels, rho: float) -> list[Row]:
    """Keep the top floor(rho * M) rows by round-trip BLEU (ties by id)."""
    if not 0.0 <= rho <= 1.0:
        raise ContractError(f"rho must lie in [0, 1], got {rho}")
    scores = round_trip_scores(rows, aux)
    scored = []
    for r, s in zip(rows, scores):
        r.score = round(float(s), 10)
        scored.append(r)
    return select_top(scored, rho)


def select_top(scored: Sequence[Row], rho: float) -> list[Row]:
    ranked = sorted(scored, key=lambda r: (-r.score, r.id))
    return ranked[: int(np.floor(rho * len(ranked) + 1e-9))]


def select_stage(cfg: PipelineConfig, ws: Workspace, tag: str = "") -> list[Row]:
    aux = load_aux(cfg, ws)
    rows = read_manifest(ws.synthetic(tag))
    kept = select_data(rows, aux, cfg.rho)
    for r in kept:
        r.audio = f"../synth/{r.audio}"
    write_manifest(ws.selected(tag), kept)
    write_manifest(ws.path("select", f"scored{tag}.jsonl"), sorted(rows, key=lambda r: (-r.score, r.id)))
    return kept


# ---------------------------------------------------------------- stage: speech translation


def st_examples(rows: Sequence[Row], base_dir, cfg: PipelineConfig) -> list[ST.STExample]:
    tv = text_vocab(cfg)
    return [ST.STExample(r.id, row_features(r, base_dir, cfg.feature_dim), tv.encode(r.tokens), r.provenance) for r in rows]


def new_st(cfg: PipelineConfig) -> ST.STModel:
    return ST.STModel(len(text_vocab(cfg)), cfg.feature_dim, cfg.model_dim, cfg.ff_dim, cfg.st_dropout, cfg.label_smoothing, stage_seed(cfg, "st", "init"))


def st_plan(cfg: PipelineConfig, synthetic: list[ST.STExample], real: list[ST.STExample], checkpoint_dir=None) -> ST.TrainPlan:
    pre = S.TrainConfig(cfg.st_pretrain_epochs, cfg.st_pretrain_batch, cfg.st_pretrain_lr, cfg.st_pretrain_warmup, stage_seed(cfg, "st", "pretrain"))
    ft = S.TrainConfig(cfg.st_finetune_epochs, cfg.st_finetune_batch, cfg.st_finetune_lr, cfg.st_finetune_warmup, stage_seed(cfg, "st", "finetune"))
    return ST.TrainPlan(synthetic, real, pre, ft, cfg.average_last, checkpoint_dir)


def train_st_stage(cfg: PipelineConfig, ws: Workspace, tag: str = "", use_synthetic: bool = True) -> ST.TwoStageResult:
    real = st_examples(read_manifest(ws.train), ws.path("world"), cfg)
    synthetic: list[ST.STExample] = []
    if use_synthetic and ws.selected(tag).exists():
        synthetic = st_examples(read_manifest(ws.selected(tag)), ws.path("select"), cfg)
    model = new_st(cfg)
    res = ST.two_stage_train(model, st_plan(cfg, synthetic, real, ws.path("st", f"ckpt{tag}")))
    nc.save_checkpoint(ws.st_model(tag), model.state_dict())
    return res


def load_st(cfg: PipelineConfig, path) -> ST.STModel:
    model = new_st(cfg)
    model.load_state_dict(nc.load_checkpoint(path))
    return model


def ensemble_scorer(steps):
    def step(prefixes):
        return sum(s(prefixes) for s in steps) / len(steps)

    return step


def ensemble_decode(models: Sequence[ST.STModel], features: np.ndarray, beam: int = 8, length_penalty: float = 1.0, max_len: int | None = None) -> S.Hypothesis:
    """Beam search scoring each token by the members' mean log-probability."""
    if not models:
        raise ContractError("ensemble needs at least one model")
    if len({m.tgt_vocab for m in models}) != 1:
        raise ContractError("ensemble members must share a target vocabulary")
    max_len = max_len or S.default_max_len(ST.adaptor_length(features.shape[0]))
    step = ensemble_scorer([m.scorer(features) for m in models])
    return S.beam_search(step, beam, max_len, length_penalty)[0]


def translate_rows(cfg: PipelineConfig, models: Sequence[ST.STModel], rows: Sequence[Row], base_dir) -> list[Row]:
    tv = text_vocab(cfg)
    out = []
    for ex in st_examples(rows, base_dir, cfg):
        if len(models) == 1:
            h = ST.translate(models[0], ex.features, cfg.eval_beam, cfg.length_penalty)
        else:
            h = ensemble_decode(models, ex.features, cfg.eval_beam, cfg.length_penalty)
        out.append(Row(ex.id, " ".join(tv.decode(h.tokens)), "real"))
    return out


def score_rows(hyps: Sequence[Row], refs: Sequence[Row]) -> M.BleuResult:
    ref_by_id = {r.id: r for r in refs}
    missing = [h.id for h in hyps if h.id not in ref_by_id]
    if missing:
        raise DataError(f"hypothesis ids without reference, e.g. {missing[0]}")
    return M.corpus_bleu([(h.tokens, ref_by_id[h.id].tokens) for h in hyps])


def decode_stage(cfg: PipelineConfig, ws: Workspace, model_paths: Sequence[Path], out_name: str) -> dict:
    models = [load_st(cfg, p) for p in model_paths]
    refs = read_manifest(ws.test)
    hyps = translate_rows(cfg, models, refs, ws.path("world"))
    write_manifest(ws.path("st", f"{out_name}.jsonl"), hyps)
    result = score_rows(hyps, refs)
    report = {
        "bleu": result.score,
        "n_test": len(refs),
        "config_hash": cfg.hash(),
        "seeds": {"global": cfg.seed, "world": cfg.world.seed},
        "detail": result.to_dict(M.signature()),
    }
    ws.path("st", f"{out_name}_metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


# ---------------------------------------------------------------- analysis metrics


def unit_bleu_t2u(cfg: PipelineConfig, ws: Workspace, limit: int = 100) -> float:
    """Corpus Unit-BLEU of target-to-unit beam output against quantized test speech."""
    aux = load_aux(cfg, ws)
    pairs = []
    for r in read_manifest(ws.test_reduced)[:limit]:
        units = generate_units(aux, r.tokens, "beam", cfg.beam, cfg.top_k, cfg.length_penalty, seed=0)
        pairs.append((units, r.z_reduced))
    return M.corpus_unit_bleu(pairs).score


def asr_bleu(cfg: PipelineConfig, ws: Workspace, rows: Sequence[Row], base_dir, limit: int = 100) -> float:
    """Round-trip text BLEU of synthetic speech: re-quantize, reduce, unit-to-target."""
    aux = load_aux(cfg, ws)
    codebook = U.KMeansCodebook.load(ws.codebook)
    pairs = []
    for r in list(rows)[:limit]:
        z = U.quantize(row_features(r, base_dir, cfg.feature_dim), codebook)
        h = S.decode_greedy(aux.u2t, aux.unit_vocab.encode_units(U.reduce(z).units))
        pairs.append((aux.text_vocab.decode(h.tokens), r.tokens))
    return M.corpus_bleu(pairs).score if pairs else 0.0


# ---------------------------------------------------------------- end to end


class _Clock:
    def __init__(self):
        self.order: list[str] = []
        self.timings: dict[str, float] = {}

    def run(self, name: str, fn, *args, **kwargs):
        if self.order and STAGES.index(name) < STAGES.index(self.order[-1]):
            raise StageError(name, ContractError(f"stage {name} cannot run after {self.order[-1]}"))
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:  # attach the stage name for the caller
            raise StageError(name, exc) from exc
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0
        if name not in self.order:
            self.order.append(name)
        return out


def _artifact_hashes(ws: Workspace) -> dict[str, str]:
    out = {}
    for p in sorted(ws.root.rglob("*")):
        if p.is_file() and p.suffix in (".jsonl", ".ubtc") and "ckpt" not in p.parts[-2]:
            out[str(p.relative_to(ws.root))] = file_hash(p)
    return out


def prepare(cfg: PipelineConfig, ws: Workspace, clock: _Clock) -> None:
    """Algorithm stages up to the auxiliary models."""
    clock.run("world", gen_world, cfg, ws)
    clock.run("units", quantize_stage, cfg, ws)
    clock.run("aux", train_t2u, cfg, ws)
    clock.run("aux", train_u2t, cfg, ws)
    clock.run("aux", train_u2s, cfg, ws)


def run_bt4st(cfg: PipelineConfig, workdir) -> dict:
    """Run every stage and write ``report.json`` (deterministic) and ``timings.json``."""
    cfg.validate()
    ws = Workspace(workdir)
    clock = _Clock()
    prepare(cfg, ws, clock)
    synth = clock.run("synthesize", synthesize_stage, cfg, ws)
    kept = clock.run("select", select_stage, cfg, ws)
    res = clock.run("train_st", train_st_stage, cfg, ws)
    metrics = clock.run("evaluate", decode_stage, cfg, ws, [ws.st_model()], "translations")
    report = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "stage_order": clock.order,
        "selection": {"M": len(synth.rows), "kept": len(kept), "rho": cfg.rho, "skipped_empty": len(synth.skipped)},
        "curves": {"pretrain": res.pretrain_curve, "finetune": res.finetune_curve, "stage_boundary": res.stage_boundary},
        "bleu": metrics["bleu"],
        "metrics": metrics["detail"],
        "artifacts": _artifact_hashes(ws),
    }
    write_report(ws, report, clock.timings)
    return report


def write_report(ws: Workspace, report: dict, timings: dict) -> None:
    ws.path("report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    ws.path("timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True))


def baseline_run(cfg: PipelineConfig, workdir) -> dict:
    """Real-data-only training with the same seeds (no synthesis)."""
    ws = Workspace(workdir)
    clock = _Clock()
    clock.run("world", gen_world, cfg, ws)
    res = clock.run("train_st", train_st_stage, cfg, ws, "_baseline", False)
    metrics = clock.run("evaluate", decode_stage, cfg, ws, [ws.st_model("_baseline")], "translations_baseline")
    return {"bleu": metrics["bleu"], "st_hash": file_hash(ws.st_model("_baseline")), "curve": res.finetune_curve}


def sweep_rho(cfg: PipelineConfig, workdir, rhos: Sequence[float]) -> list[dict]:
    """Shared synthesis, then one selection + ST training + evaluation per ratio."""
    cfg.validate()
    ws = Workspace(workdir)
    clock = _Clock()
    prepare(cfg, ws, clock)
    synth = clock.run("synthesize", synthesize_stage, cfg, ws)
    aux = load_aux(cfg, ws)
    scored = read_manifest(ws.synthetic())
    for r, s in zip(scored, round_trip_scores(scored, aux)):
        r.score = round(float(s), 10)
    table = []
    for rho in rhos:
        if not 0.0 <= rho <= 1.0:
            raise ContractError(f"rho must lie in [0, 1], got {rho}")
        tag = f"_rho{rho:g}"
        kept = select_top(scored, rho)
        write_manifest(ws.selected(tag), [Row(**{**r.__dict__, "audio": f"../synth/{r.audio}"}) for r in kept])
        train_st_stage(cfg, ws, tag)
        m = decode_stage(cfg, ws, [ws.st_model(tag)], f"translations{tag}")
        table.append({"rho": rho, "M": len(synth.rows), "kept": len(kept), "bleu": m["bleu"]})
    ws.path("sweep_rho.json").write_text(json.dumps(table, indent=2))
    return table
