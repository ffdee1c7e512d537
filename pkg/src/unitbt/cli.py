"""Command line entry point: ``unitbt <command> --config c.json [--key value ...]``.

Exit status: 0 on success, 1 on usage or configuration errors, 2 on data errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import metrics as M
from . import pipeline as P
from .config import ConfigError, load_config
from .errors import UnitBTError
from .manifest import read_manifest

COMMANDS = (
    "gen-world",
    "quantize",
    "train-t2u",
    "train-u2t",
    "train-u2s",
    "synthesize",
    "select",
    "train-st",
    "decode",
    "ensemble",
    "score",
    "bootstrap",
    "end2end",
    "sweep-rho",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unitbt", description="Back translation for speech translation on a synthetic world.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--workdir", default="run", help="workspace directory")
        if name in ("synthesize", "select", "train-st"):
            p.add_argument("--tag", default="", help="artifact name suffix")
        if name == "synthesize":
            p.add_argument("--diverse-seed", type=int, default=None, help="dropout-on beam decoding with this seed")
        if name == "train-st":
            p.add_argument("--baseline", action="store_true", help="train on real rows only")
        if name == "decode":
            p.add_argument("--model", default=None, help="ST checkpoint (default: st/st.ubtc)")
            p.add_argument("--out", default="translations")
        if name == "ensemble":
            p.add_argument("--models", required=True, help="comma separated ST checkpoints")
            p.add_argument("--out", default="translations_ensemble")
        if name == "score":
            p.add_argument("--hyp", required=True)
            p.add_argument("--ref", required=True)
        if name == "bootstrap":
            p.add_argument("--sys-a", required=True)
            p.add_argument("--sys-b", required=True)
            p.add_argument("--ref", required=True)
            p.add_argument("--n-resamples", type=int, default=1000)
            p.add_argument("--bootstrap-seed", type=int, default=12345)
        if name == "sweep-rho":
            p.add_argument("rhos", help="comma separated ratios, e.g. 0,0.25,0.5,0.75,1.0")
    return parser


def parse_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(extra):
        key = extra[i]
        if not key.startswith("--") or i + 1 >= len(extra):
            raise UsageError(f"expected '--key value' override, got {' '.join(extra[i:])!r}")
        out[key[2:]] = extra[i + 1]
        i += 2
    return out


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _hyps_and_refs(hyp_path, ref_path):
    refs = {r.id: r for r in read_manifest(ref_path)}
    hyps = read_manifest(hyp_path)
    return hyps, refs


def run(args, cfg) -> None:
    ws = P.Workspace(args.workdir)
    cmd = args.command
    if cmd == "gen-world":
        _emit(P.gen_world(cfg, ws))
    elif cmd == "quantize":
        _emit(P.quantize_stage(cfg, ws))
    elif cmd == "train-t2u":
        _emit({"final_loss": P.train_t2u(cfg, ws)[-1]})
    elif cmd == "train-u2t":
        _emit({"final_loss": P.train_u2t(cfg, ws)[-1]})
    elif cmd == "train-u2s":
        _emit({"final_loss": P.train_u2s(cfg, ws)[-1]})
    elif cmd == "synthesize":
        res = P.synthesize_stage(cfg, ws, args.tag, args.diverse_seed)
        _emit({"rows": len(res.rows), "skipped_empty": len(res.skipped)})
    elif cmd == "select":
        _emit({"kept": len(P.select_stage(cfg, ws, args.tag)), "rho": cfg.rho})
    elif cmd == "train-st":
        tag = "_baseline" if args.baseline and not args.tag else args.tag
        res = P.train_st_stage(cfg, ws, tag, use_synthetic=not args.baseline)
        _emit({"pretrain_epochs": len(res.pretrain_curve), "finetune_epochs": len(res.finetune_curve)})
    elif cmd == "decode":
        _emit(P.decode_stage(cfg, ws, [Path(args.model) if args.model else ws.st_model()], args.out))
    elif cmd == "ensemble":
        _emit(P.decode_stage(cfg, ws, [Path(p) for p in args.models.split(",") if p], args.out))
    elif cmd == "score":
        hyps, refs = _hyps_and_refs(args.hyp, args.ref)
        _emit(P.score_rows(hyps, list(refs.values())).to_dict(M.signature()))
    elif cmd == "bootstrap":
        refs = {r.id: r for r in read_manifest(args.ref)}
        a = {r.id: r for r in read_manifest(args.sys_a)}
        b = {r.id: r for r in read_manifest(args.sys_b)}
        ids = sorted(refs)
        missing = [i for i in ids if i not in a or i not in b]
        if missing:
            raise UnitBTError(f"systems lack hypotheses for {len(missing)} reference ids, e.g. {missing[0]}")
        res = M.paired_bootstrap(
            [a[i].tokens for i in ids], [b[i].tokens for i in ids], [refs[i].tokens for i in ids],
            n_resamples=args.n_resamples, seed=args.bootstrap_seed,
        )
        _emit({**res.__dict__, "significant": res.significant})
    elif cmd == "end2end":
        report = P.run_bt4st(cfg, ws.root)
        _emit({"bleu": report["bleu"], "report": str(ws.path("report.json"))})
    elif cmd == "sweep-rho":
        try:
            rhos = [float(v) for v in args.rhos.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"cannot parse ratios {args.rhos!r}") from None
        bad = [r for r in rhos if not 0.0 <= r <= 1.0]
        if bad:
            raise ConfigError(f"rho must lie in [0, 1], got {bad[0]}")
        table = P.sweep_rho(cfg, ws.root, rhos)
        print("rho\tkept\tBLEU")
        for row in table:
            print(f"{row['rho']:g}\t{row['kept']}\t{row['bleu']:.2f}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("missing command")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = load_config(args.config, parse_overrides(extra))
    except (UsageError, ConfigError) as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        run(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except P.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc.cause, ConfigError) else 2
    except (UnitBTError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
