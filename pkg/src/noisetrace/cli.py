"""``noisetrace`` command line: synth, ingest, separate, attack, train, eval, report, validate."""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackSpec, apply_attack, attack_manifest
from .audio import load_audio, save_audio
from .components import ComponentStore, component_path
from .config import RunConfig, dump_config, load_config, parse_config
from .datasets import (Manifest, generate_synth_corpus, parse_asvspoof_protocol, parse_generic_manifest,
                       validate_manifest, write_manifest)
from .detector import ComponentKind, init_model, load_model, save_model
from .errors import ConfigError, DataError, NoiseTraceError
from .evaluation import compare_detectors, evaluate, read_scores, score_store, write_scores
from .training import TrainConfig, set_deterministic, train

log = logging.getLogger("noisetrace")


class CommandFailed(NoiseTraceError):
    pass


def _write_run_record(out: Path, command: str, cfg: RunConfig, args, extra=None):
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "tool_version": __version__,
        "seed": cfg.seed,
        "argv": sys.argv,
        "deterministic": bool(args.deterministic),
        "jobs": args.jobs,
        "python": platform.python_version(),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "config": cfg.to_dict(),
        **(extra or {}),
    }
    (out / f"run_{command}.json").write_text(json.dumps(record, indent=2, default=str))
    dump_config(cfg, out / "config_snapshot.yaml")


def _manifest(cfg: RunConfig, args) -> Manifest:
    path = getattr(args, "manifest", None) or cfg.data.manifest
    if not path:
        raise ConfigError("no manifest: pass --manifest or set data.manifest in the config")
    return parse_generic_manifest(path)


# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    out = Path(args.out_dir or Path(cfg.out) / "corpus")
    synth = cfg.synth
    if args.seed is not None:
        synth = replace(synth, seed=args.seed)
    manifest = generate_synth_corpus(synth, out)
    print(f"wrote {len(manifest)} tracks to {out} (manifest {out / 'manifest.csv'})")
    return 0


def cmd_ingest(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    if args.protocol:
        if not args.audio_dir:
            raise ConfigError("--protocol needs --audio-dir")
        manifest = parse_asvspoof_protocol(args.protocol, args.audio_dir, args.split, args.extension,
                                           args.dataset or "asvspoof2019-la")
    elif args.csv:
        manifest = parse_generic_manifest(args.csv, args.dataset)
    else:
        raise ConfigError("ingest needs --protocol or --csv")
    dst = Path(args.output or out / "manifest.csv")
    write_manifest(manifest, dst)
    missing = getattr(manifest, "unresolved", [])
    print(f"{len(manifest)} records -> {dst}" + (f" ({len(missing)} unresolved files)" if missing else ""))
    return 0


def cmd_separate(cfg: RunConfig, args) -> int:
    manifest = _manifest(cfg, args)
    separator = cfg.separator.build()
    if separator is None:
        raise ConfigError("separate needs separator.kind builtin or external")
    out = Path(args.out_dir or cfg.data.components or Path(cfg.out) / "components")
    s_recs, n_recs, failures = [], [], []
    for rec in manifest:
        try:
            res = separator(load_audio(rec.path), rec.utt_id)
        except Exception as exc:
            failures.append(f"{rec.utt_id}: {exc}")
            continue
        for kind, clip, bucket in ((ComponentKind.SPEECH, res.speech, s_recs), (ComponentKind.NOISE, res.noise, n_recs)):
            p = save_audio(clip, component_path(out, kind, rec.utt_id), subtype="FLOAT")
            bucket.append(replace(rec, path=str(p.resolve())))
    write_manifest(Manifest(s_recs), out / "manifest_s.csv")
    write_manifest(Manifest(n_recs), out / "manifest_n.csv")
    _write_run_record(out, "separate", cfg, args, {"separator_id": separator.separator_id, "failures": failures})
    if failures:
        print("separation failed for:\n  " + "\n  ".join(failures), file=sys.stderr)
        return 1
    print(f"separated {len(manifest)} tracks into {out}/s and {out}/n")
    return 0


def cmd_attack(cfg: RunConfig, args) -> int:
    manifest = _manifest(cfg, args)
    specs = [AttackSpec.parse(a) for a in (args.attack or cfg.attacks)]
    base = Path(args.out_dir or Path(cfg.out) / "attacked")
    for spec in specs:
        out = base / spec.condition
        attacked = attack_manifest(manifest, spec, out)
        write_manifest(attacked, out / "manifest.csv")
        print(f"{spec.condition}: {len(attacked)} tracks -> {out}")
    _write_run_record(base, "attack", cfg, args)
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    kind = ComponentKind.parse(args.component)
    manifest = _manifest(cfg, args)
    components = args.components or cfg.data.components
    separator = cfg.separator.build()
    if kind is not ComponentKind.FULL:
        if components is not None and not (Path(components) / kind.short).is_dir():
            if separator is None:
                raise DataError(f"no {kind.short}/ tree under {components}; run `noisetrace separate` first "
                                f"or configure a separator")
            components = None
        if components is None and separator is None:
            raise DataError(f"the {kind.short} detector needs separated components: run `noisetrace separate` "
                            f"and set data.components, or set separator.kind to builtin/external")
    tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "component_kind": kind.value,
                                  "seed": cfg.seed if args.seed is None else args.seed})
    stores = {}
    for split in ("train", "dev"):
        part = manifest.split(split)
        if len(part) == 0:
            raise DataError(f"manifest has no {split} records")
        stores[split] = ComponentStore.from_manifest(part, kind, separator, components, jobs=args.jobs)
    run_dir = Path(cfg.out) / f"train_{kind.short}"
    _write_run_record(run_dir, "train", cfg, args, {"component": kind.value})
    model = init_model(cfg.detector, np.random.default_rng(tcfg.seed), kind)
    resume_from = run_dir / "checkpoint.ntd" if args.resume and (run_dir / "checkpoint.ntd").exists() else None
    model, state = train(model, stores["train"], stores["dev"], tcfg, run_dir, resume_from=resume_from)
    dst = Path(cfg.out) / "models" / f"D_{kind.short}.ntd"
    save_model(model, dst, {"best_epoch": state.best_epoch})
    print(f"D_{kind.short}: {state.epoch} epochs, best epoch {state.best_epoch} "
          f"(val loss {state.best_val_loss:.5f}) -> {dst}")
    return 0


def _parse_models(items) -> dict[ComponentKind, Path]:
    models = {}
    for item in items or []:
        col, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--model expects COLUMN=PATH (column x, s or n), got {item!r}")
        kind = ComponentKind.parse(col)
        if kind in models:
            raise ConfigError(f"column {col} given twice")
        models[kind] = Path(path)
    return models


def cmd_eval(cfg: RunConfig, args) -> int:
    manifest = _manifest(cfg, args).split(cfg.eval.split)
    if len(manifest) == 0:
        raise DataError(f"manifest has no {cfg.eval.split} records")
    model_paths = _parse_models(args.model)
    if not model_paths:
        model_paths = {k: p for k in ComponentKind
                       if (p := Path(cfg.out) / "models" / f"D_{k.short}.ntd").exists()}
    if not model_paths:
        raise ConfigError("no models: pass --model x=PATH (and s=, n=)")
    models = {}
    for col, path in model_paths.items():
        m = load_model(path)
        if m.component_kind is not col:
            raise ConfigError(f"{path} is a {m.component_kind.value} detector but was given for column {col.short}")
        models[col] = m
    separator = cfg.separator.build()
    specs = [AttackSpec.parse(a) for a in (args.conditions or cfg.attacks)]
    out = Path(args.out_dir or Path(cfg.out) / "eval")
    dataset = manifest.records[0].dataset or "dataset"
    reports = {}
    for spec in specs:
        transform = None if spec.condition == "clean" else (lambda clip, s=spec: apply_attack(clip, s))
        for col, model in models.items():
            # attacks are applied to x before separation, never reusing clean components
            store = ComponentStore.from_manifest(manifest, col, separator,
                                                 None if transform else cfg.data.components,
                                                 transform=transform, jobs=args.jobs)
            recs = score_store(model, store, spec.condition, cfg.eval.aggregate, cfg.eval.per_segment)
            write_scores(recs, out / "scores" / f"{dataset}__{spec.condition}__{col.short}.csv")
            rep = evaluate(recs, cfg.eval.threshold)
            reports[(col, dataset, spec.condition)] = rep
            log.info("%s %s: AUC %.4f  B.Acc %.4f", spec.condition, col.short, rep.auc, rep.balanced_accuracy)
    rows = compare_detectors(reports, out, kinds=list(models))
    _write_run_record(out, "eval", cfg, args, {"models": {k.short: str(v) for k, v in model_paths.items()}})
    _print_table(rows)
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    score_dir = Path(args.scores or Path(cfg.out) / "eval" / "scores")
    files = sorted(score_dir.glob("*.csv"))
    if not files:
        raise DataError(f"no score files in {score_dir}")
    reports = {}
    for f in files:
        recs = read_scores(f)
        dataset = f.stem.split("__")[0]
        kinds = {r.component_kind for r in recs}
        conds = {r.condition for r in recs}
        if len(kinds) != 1 or len(conds) != 1:
            raise DataError(f"{f} mixes components or conditions")
        reports[(kinds.pop(), dataset, conds.pop())] = evaluate(recs, cfg.eval.threshold)
    out = Path(args.out_dir or score_dir.parent)
    rows = compare_detectors(reports, out)
    _print_table(rows)
    return 0


def cmd_validate(cfg: RunConfig, args) -> int:
    problems = []
    path = getattr(args, "manifest", None) or cfg.data.manifest
    if path:
        manifest = parse_generic_manifest(path)
        problems = validate_manifest(manifest)
        print(f"{len(manifest)} records checked, {len(problems)} problem(s)")
    else:
        print("config OK (no manifest configured)")
    for p in problems:
        print("  " + p, file=sys.stderr)
    return 1 if problems else 0


def _print_table(rows):
    print(f"{'dataset':<12} {'condition':<10} {'D':<3} {'AUC':>7} {'B.ACC':>7}")
    for r in rows:
        if r["missing"]:
            print(f"{r['dataset']:<12} {r['condition']:<10} {r['component']:<3} {'-':>7} {'-':>7}")
            continue
        a = f"{r['auc']:.3f}" + ("*" if r["best_auc"] else " ")
        b = f"{r['balanced_accuracy']:.3f}" + ("*" if r["best_balanced_accuracy"] else " ")
        print(f"{r['dataset']:<12} {r['condition']:<10} {r['component']:<3} {a:>8} {b:>8}")


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "separate": cmd_separate, "attack": cmd_attack,
    "train": cmd_train, "eval": cmd_eval, "report": cmd_report, "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel per-track workers")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible")
    common.add_argument("--out", help="run directory (overrides config `out`)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="noisetrace", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    s.add_argument("--out-dir")

    s = sub.add_parser("ingest", parents=[common], help="build a manifest from a protocol or CSV")
    s.add_argument("--protocol")
    s.add_argument("--audio-dir")
    s.add_argument("--split", default="train", choices=["train", "dev", "eval"])
    s.add_argument("--extension", default=".flac")
    s.add_argument("--csv")
    s.add_argument("--dataset")
    s.add_argument("--output")

    for name, helptext in (("separate", "write s/ and n/ component trees"), ("attack", "attack a manifest"),
                           ("train", "train one detector"), ("eval", "score and compare detectors"),
                           ("validate", "check config and manifest files")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--manifest")
        if name in ("separate", "attack", "eval"):
            s.add_argument("--out-dir")
        if name == "attack":
            s.add_argument("--attack", action="append", help="clean | mp3-<kbps> | lp-<cutoff_hz>")
        if name == "train":
            s.add_argument("--component", required=True, choices=["x", "s", "n"])
            s.add_argument("--components", help="root of a `separate` output tree")
            s.add_argument("--resume", action="store_true")
        if name == "eval":
            s.add_argument("--model", action="append", help="COLUMN=PATH with COLUMN in x, s, n")
            s.add_argument("--conditions", nargs="+")

    s = sub.add_parser("report", parents=[common], help="rebuild comparison tables from score files")
    s.add_argument("--scores")
    s.add_argument("--out-dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else parse_config({})
        if args.out:
            cfg.out = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        if args.deterministic:
            set_deterministic(True)
        return COMMANDS[args.command](cfg, args)
    except (NoiseTraceError, FileNotFoundError) as exc:
        print(f"noisetrace {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
