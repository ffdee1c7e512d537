import itertools
import json

import numpy as np
import pytest

from unitbt import manifest as MF
from unitbt import numcore as nc
from unitbt import pipeline as P
from unitbt import seq2seq as S
from unitbt import stmodel as ST
from unitbt import units as U
from unitbt import worldgen as W
from unitbt.config import load_config
from unitbt.errors import ContractError

TINY = {
    "n_train": 24, "n_test": 8, "n_mono": 30, "K": 16, "feature_dim": 16, "kmeans_iters": 10,
    "beam": 2, "eval_beam": 2, "model_dim": 16, "ff_dim": 32, "unit_emb_dim": 8, "dp_hidden": 16,
    "aux_epochs": 3, "aux_batch": 8, "aux_warmup": 5,
    "st_pretrain_epochs": 2, "st_pretrain_batch": 8, "st_pretrain_warmup": 5,
    "st_finetune_epochs": 2, "st_finetune_batch": 8, "st_finetune_warmup": 5, "average_last": 2,
    "world.vocab_size": 12,
}


def tiny_cfg(**kw):
    return load_config(None, {**TINY, **kw})


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    cfg = tiny_cfg()
    ws = P.Workspace(tmp_path_factory.mktemp("ws"))
    P.prepare(cfg, ws, P._Clock())
    return cfg, ws


def test_workspace_layout(prepared):
    _, ws = prepared
    for p in (ws.train, ws.test, ws.mono, ws.speakers, ws.codebook, ws.train_reduced, ws.test_reduced, ws.model("t2u"), ws.model("u2t"), ws.model("u2s")):
        assert p.exists(), p
    row = MF.read_manifest(ws.train_reduced)[0]
    assert row.audio.startswith("../world/")
    assert MF.load_row_audio(row, ws.train_reduced.parent).size > 0


def test_reduced_corpus_oracle_codebook(tmp_path):
    spec = W.WorldSpec(insertion_noise=0.0, wave_noise=0.0, vocab_size=10, seed=3)
    world = W.World(spec)
    records = W.generate_corpus(spec, 6)
    ws = P.Workspace(tmp_path)
    rows = P.records_to_rows(records, "audio", ws, tmp_path)
    cb = world.oracle_codebook()
    out = P.build_reduced_corpus(rows, tmp_path, cb)
    for rec, row in zip(records, out):
        assert row.z == rec.units.tolist()
        assert tuple(row.z_reduced) == rec.reduced.units and tuple(row.durations) == rec.reduced.durations
    again = P.build_reduced_corpus(rows, tmp_path, cb)
    assert [r.to_json() for r in again] == [r.to_json() for r in out]
    assert P.build_reduced_corpus([], tmp_path, cb) == []


def test_synthesis_multi_speaker_and_reproducible(prepared, tmp_path):
    cfg, ws = prepared
    aux = P.load_aux(cfg, ws)
    mono = MF.read_manifest(ws.mono)
    a = P.synthesize_bt(mono, aux, cfg, tmp_path / "a")
    b = P.synthesize_bt(mono, aux, cfg, tmp_path / "b")
    assert [r.to_json() for r in a.rows] == [r.to_json() for r in b.rows]
    for r in a.rows:
        assert (tmp_path / "a" / r.audio).read_bytes() == (tmp_path / "b" / r.audio).read_bytes()
        assert r.provenance == "synthetic"
        assert all(x != y for x, y in zip(r.z_reduced, r.z_reduced[1:]))
        assert len(r.durations) == len(r.z_reduced) and min(r.durations) >= 1
        assert r.speaker in aux.speaker_ids
    assert len({r.speaker for r in a.rows}) >= 2
    assert len(a.rows) + len(a.skipped) == len(mono)


def test_synthesis_single_speaker_uses_average(prepared, tmp_path):
    cfg, ws = prepared
    aux = P.load_aux(cfg, ws)
    cfg1 = tiny_cfg(speaker_mode="single")
    mono = MF.read_manifest(ws.mono)[:5]
    res = P.synthesize_bt(mono, aux, cfg1, tmp_path)
    avg = aux.u2s.average_speaker()
    for r in res.rows:
        assert r.speaker == -1
        seed = P.stage_seed(cfg1, "synth", "", r.id)
        expect = aux.u2s.synthesize(r.z_reduced, avg, durations=np.asarray(r.durations), seed=seed)
        np.testing.assert_array_equal(MF.read_audio(tmp_path / r.audio), expect.astype(np.float32))


@pytest.mark.parametrize("method", ["greedy", "topk", "sample"])
def test_other_generation_methods(prepared, tmp_path, method):
    cfg, ws = prepared
    aux = P.load_aux(cfg, ws)
    res = P.synthesize_bt(MF.read_manifest(ws.mono)[:4], aux, tiny_cfg(generation=method), tmp_path)
    assert len(res.rows) + len(res.skipped) == 4


def _scored(n, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        r = MF.Row(f"s{i:03d}", "t1", "synthetic", z_reduced=[1], durations=[1], audio="a.f32")
        r.score = float(rng.choice([0.0, 10.0, 25.5, 50.0, 100.0]))
        rows.append(r)
    return rows


@pytest.mark.parametrize("rho", [0.0, 0.25, 0.5, 0.75, 1.0])
@pytest.mark.parametrize("n", [1, 7, 40, 2000])
def test_select_top_sizes_and_order(rho, n):
    rows = _scored(n, seed=n)
    kept = P.select_top(rows, rho)
    assert len(kept) == int(np.floor(rho * n))
    dropped = [r for r in rows if r.id not in {k.id for k in kept}]
    if kept and dropped:
        assert min(r.score for r in kept) >= max(r.score for r in dropped)
    assert P.select_top(list(reversed(rows)), rho) == kept


def test_select_data_rejects_bad_rho(prepared):
    cfg, ws = prepared
    with pytest.raises(ContractError):
        P.select_data([], P.load_aux(cfg, ws), 1.5)


def test_round_trip_scores_in_range(prepared, tmp_path):
    cfg, ws = prepared
    aux = P.load_aux(cfg, ws)
    res = P.synthesize_bt(MF.read_manifest(ws.mono)[:6], aux, cfg, tmp_path)
    for s in P.round_trip_scores(res.rows, aux):
        assert 0.0 <= s <= 100.0


def test_rho_zero_matches_baseline(tmp_path):
    cfg = tiny_cfg(rho=0.0)
    P.run_bt4st(cfg, tmp_path)
    assert MF.read_manifest(P.Workspace(tmp_path).selected()) == []
    base = P.baseline_run(cfg, tmp_path)
    assert base["st_hash"] == MF.file_hash(P.Workspace(tmp_path).st_model())


def test_report_contents_and_determinism(tmp_path):
    cfg = tiny_cfg()
    a = P.run_bt4st(cfg, tmp_path / "a")
    b = P.run_bt4st(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert a["stage_order"] == list(P.STAGES)
    assert a["selection"]["kept"] == int(np.floor(0.75 * a["selection"]["M"]))
    assert a["curves"]["stage_boundary"] == cfg.st_pretrain_epochs
    assert set(json.loads((tmp_path / "a" / "timings.json").read_text())) == set(P.STAGES)
    assert a == b


def test_diverse_runs_differ_and_duplicates_warn(prepared):
    cfg, ws = prepared
    p1, p2 = P.diverse_bt(cfg, ws, [1, 2])
    assert p1.read_bytes() != p2.read_bytes()
    with pytest.warns(UserWarning):
        q1, q2 = P.diverse_bt(cfg, ws, [3, 3])
    assert q1 == q2
    first = q1.read_bytes()
    P.diverse_bt(cfg, ws, [3])
    assert q1.read_bytes() == first
    with pytest.raises(ContractError):
        P.diverse_bt(cfg, ws, [])


def _members(V, n, feature_dim=6, seed=0):
    return [ST.STModel(V, feature_dim=feature_dim, dim=8, ff_dim=16, dropout_rate=0.0, seed=seed + i) for i in range(n)]


def test_ensemble_of_duplicates_equals_single(rng):
    m = _members(9, 1)[0]
    for _ in range(5):
        f = rng.normal(size=(18, 6))
        single = ST.translate(m, f, beam=4)
        assert P.ensemble_decode([m], f, beam=4) == single
        triple = P.ensemble_decode([m, m, m], f, beam=4)
        assert triple.tokens == single.tokens
        assert triple.score == pytest.approx(single.score, rel=0, abs=1e-12)


@pytest.mark.parametrize("case", range(10))
def test_ensemble_matches_brute_force(case):
    rng = np.random.default_rng(case)
    members = _members(5, 2, seed=10 * case)
    f = rng.normal(size=(12, 6))
    max_len, alpha = 3, 1.0
    scorers = [m.scorer(f) for m in members]
    best = None
    for n in range(1, max_len + 1):
        for body in itertools.product([2, 3, 4], repeat=n - 1):
            toks = body + (S.EOS,)
            lp = 0.0
            for t in range(n):
                prefix = np.asarray([(S.EOS,) + toks[:t]])
                mean = sum(s(prefix) for s in scorers) / 2
                lp += float(S._restrict(mean, t, max_len)[0, toks[t]])
            score = S.length_penalized(lp, n, alpha)
            if best is None or score > best[0]:
                best = (score, toks)
    got = P.ensemble_decode(members, f, beam=64, length_penalty=alpha, max_len=max_len)
    assert got.tokens == best[1]
    assert got.score == pytest.approx(best[0], abs=1e-9)


def test_ensemble_vocab_mismatch(rng):
    with pytest.raises(ContractError):
        P.ensemble_decode(_members(5, 1) + _members(6, 1), rng.normal(size=(8, 6)))
    with pytest.raises(ContractError):
        P.ensemble_decode([], rng.normal(size=(8, 6)))


def test_stage_order_enforced():
    clock = P._Clock()
    clock.run("units", lambda: None)
    with pytest.raises(P.StageError) as info:
        clock.run("world", lambda: None)
    assert info.value.stage == "world"


def test_stage_error_wraps_cause():
    def boom():
        raise ValueError("bad")

    with pytest.raises(P.StageError) as info:
        P._Clock().run("select", boom)
    assert isinstance(info.value.cause, ValueError)


def test_sweep_rho_table(tmp_path):
    table = P.sweep_rho(tiny_cfg(), tmp_path, [0.0, 0.5, 1.0])
    M = table[0]["M"]
    assert [r["kept"] for r in table] == [0, M // 2, M]
    assert json.loads((tmp_path / "sweep_rho.json").read_text()) == table


def test_analysis_metrics(prepared):
    cfg, ws = prepared
    assert 0.0 <= P.unit_bleu_t2u(cfg, ws, limit=4) <= 100.0
    rows = MF.read_manifest(ws.train)[:4]
    assert 0.0 <= P.asr_bleu(cfg, ws, rows, ws.path("world")) <= 100.0


def test_codebook_seeded_from_config(prepared, tmp_path):
    cfg, ws = prepared
    cb = P.fit_codebook(MF.read_manifest(ws.train), ws.path("world"), cfg)
    assert cb.centroids.tobytes() == U.KMeansCodebook.load(ws.codebook).centroids.tobytes()
    assert nc.load_checkpoint(ws.speakers)["speaker.0"].shape == (256,)
