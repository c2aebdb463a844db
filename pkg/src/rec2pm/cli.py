"""Command-line entry point wiring the modules into reproducible runs.

Exit codes: 0 success, 1 usage error (bad flags or subcommand), 2 runtime
failure (unreadable config, schema violations, bad data, diverged runs).
Every value can come from three places with fixed precedence:
command-line flag > JSON config file (--config) > built-in default.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from typing import Optional

from . import __version__
from .checkpoint import load_params, save_params
from .data import (DatasetError, SyntheticSpec, generate_synthetic,
                   load_dataset, save_dataset, split_leave_one_out)
from .evaluation import (MEM_ITERATIVE, PROTOCOLS, evaluate,
                         export_attention, run_ablation_suite)
from .inference import InferenceSession, bench
from .memory import load_memory, save_memory
from .training import (TRAINERS, TrainConfig, config_from_dict, train,
                       write_metrics_log)


class UsageError(Exception):
    """Bad argv: wrong flags, missing subcommand."""


class ConfigError(Exception):
    """Unreadable or schema-violating config file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


# -------------------------------------------------------------- config file

_SPEC_KEYS = set(SyntheticSpec.__dataclass_fields__)
_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)
_RUN_KEYS = {"protocol", "target", "overlap", "user_cap", "reps", "top_k",
             "per_layer", "slot_counts"}
_KNOWN_KEYS = _SPEC_KEYS | _TRAIN_KEYS | _RUN_KEYS

_INT_KEYS = {"l_seg", "l_full", "c", "d", "n_layers", "n_heads",
             "batch_size", "epochs", "patience", "seed", "n_users",
             "seq_len", "catalog_size", "n_categories", "prefs_per_user",
             "session_burst_len", "reps"}
_FLOAT_KEYS = {"lr", "weight_decay", "consistency_weight", "recon_weight",
               "init_scale", "long_term_weight", "noise_rate"}
_STR_KEYS = {"trainer", "mode", "mse_reduction", "protocol", "target"}
_NULLABLE_INT_KEYS = {"valid_user_cap", "overlap", "user_cap", "top_k"}


def _check_value(key: str, value) -> None:
    def fail(expected):
        raise ConfigError(f"schema violation: {key} must be {expected}, "
                          f"got {value!r}")
    if key in _NULLABLE_INT_KEYS:
        if value is not None and (isinstance(value, bool)
                                  or not isinstance(value, int)):
            fail("an integer or null")
    elif key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            fail("an integer")
    elif key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail("a number")
    elif key in _STR_KEYS:
        if not isinstance(value, str):
            fail("a string")
    elif key == "per_layer":
        if not isinstance(value, bool):
            fail("a boolean")
    elif key == "slot_counts":
        ok = (isinstance(value, list) and value
              and all(isinstance(v, int) and not isinstance(v, bool)
                      for v in value))
        if not ok:
            fail("a non-empty list of integers")


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"schema violation: config root must be an "
                          f"object, got {type(raw).__name__}")
    unknown = sorted(set(raw) - _KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"schema violation: unknown config keys {unknown}")
    for key, value in raw.items():
        _check_value(key, value)
    return raw


def _merge(args: argparse.Namespace, config: dict, keys) -> dict:
    """flag > config > (caller's defaults, by omission)."""
    merged = {}
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
        elif key in config:
            merged[key] = config[key]
    return merged


def merged_train_config(args, config) -> TrainConfig:
    values = _merge(args, config, _TRAIN_KEYS)
    try:
        return config_from_dict(values)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"schema violation: {e}") from e


def merged_synth_spec(args, config) -> SyntheticSpec:
    values = _merge(args, config, _SPEC_KEYS)
    try:
        return SyntheticSpec(**values).validate()
    except (TypeError, DatasetError) as e:
        raise ConfigError(f"schema violation: {e}") from e


# ---------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    started: str = ""
    finished: str = ""
    arch: Optional[dict] = None
    artifacts: dict = field(default_factory=dict)

    def write(self, path) -> None:
        # atomic: never leave a half-written manifest behind
        blob = json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as f:
                f.write(blob + "\n")
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def _arch_for(path: str, manifest_path: Optional[str]) -> dict:
    """The architecture travels in the run manifest, not the weight file."""
    mp = manifest_path or os.path.join(os.path.dirname(os.path.abspath(path)),
                                       "manifest.json")
    try:
        with open(mp) as f:
            manifest = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read manifest {mp} (needed for the "
                          f"architecture of {path}): {e}") from e
    arch = manifest.get("arch")
    if not isinstance(arch, dict):
        raise ConfigError(f"manifest {mp} has no architecture entry")
    return arch


def _load_model(args):
    return load_params(args.params, _arch_for(args.params, args.manifest))


# ------------------------------------------------------------- subcommands

def _cmd_gen_data(args, config) -> int:
    spec = merged_synth_spec(args, config)
    dataset = generate_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "dataset.jsonl")
    save_dataset(dataset, path)
    manifest = RunManifest(command="gen-data",
                           config=dataclasses.asdict(spec), seed=spec.seed,
                           started=_now(), finished=_now(),
                           artifacts={"dataset": path})
    manifest.write(os.path.join(args.out, "manifest.json"))
    print(f"wrote {len(dataset.users)} users over catalog "
          f"{dataset.catalog_size} to {path}")
    return 0


def _cmd_train(args, config) -> int:
    cfg = merged_train_config(args, config)
    dataset = load_dataset(args.data)
    started = _now()
    params, log = train(dataset, cfg)
    os.makedirs(args.out, exist_ok=True)
    params_path = os.path.join(args.out, "params.r2pw")
    save_params(params, params_path)
    metrics_path = os.path.join(args.out, "metrics.jsonl")
    write_metrics_log(log, metrics_path)
    manifest = RunManifest(command="train",
                           config=dataclasses.asdict(cfg), seed=cfg.seed,
                           started=started, finished=_now(),
                           arch=params.arch,
                           artifacts={"params": params_path,
                                      "metrics": metrics_path,
                                      "data": args.data})
    manifest.write(os.path.join(args.out, "manifest.json"))
    final = log[-1] if log else {}
    print(f"trained {cfg.trainer} for {len(log)} epochs; "
          f"final loss {final.get('loss_total', float('nan')):.4f}; "
          f"params at {params_path}")
    return 0


def _cmd_evaluate(args, config) -> int:
    params = _load_model(args)
    dataset = load_dataset(args.data)
    protocol = args.protocol or config.get("protocol", MEM_ITERATIVE)
    merged = _merge(args, config, ("target", "overlap", "user_cap", "mode"))
    report = evaluate(params, dataset, protocol,
                      mode=merged.get("mode", "OVERWRITE"),
                      target=merged.get("target", "test"),
                      overlap=merged.get("overlap"),
                      user_cap=merged.get("user_cap"),
                      seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.json")
    with open(report_path, "w") as f:
        f.write(report.to_json() + "\n")
    print(report.to_json())
    return 0


def _cmd_infer(args, config) -> int:
    params = _load_model(args)
    memory = load_memory(args.memory) if args.memory else None
    mode = args.mode or config.get("mode", "OVERWRITE")
    session = InferenceSession(params, mode=memory.mode if memory else mode,
                               memory=memory)
    if args.items:
        session.ingest_many(args.items)
    top_k = args.top_k or config.get("top_k") or 10
    ranking, scores = session.predict_next(top_k=top_k)
    out = {"ranking": [int(i) for i in ranking],
           "scores": [float(scores[i]) for i in ranking]}
    print(json.dumps(out))
    if args.save_memory:
        if session.memory is None:
            raise ConfigError("no full segment ingested; nothing to save")
        save_memory(session.memory, args.save_memory)
    return 0


def _cmd_bench(args, config) -> int:
    mem_params = _load_model(args)
    full_params = load_params(args.full_params,
                              _arch_for(args.full_params, args.full_manifest))
    dataset = load_dataset(args.data)
    merged = _merge(args, config, ("reps", "user_cap"))
    cap = merged.get("user_cap") or 3
    streams = [split_leave_one_out(u.items)[0]
               for u in dataset.users[:cap]]
    report = bench(mem_params, full_params, streams,
                   reps=merged.get("reps", 3))
    line = json.dumps(report, sort_keys=True)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "bench.jsonl"), "w") as f:
        f.write(line + "\n")
    print(line)
    return 0


def _cmd_ablate(args, config) -> int:
    cfg = merged_train_config(args, config)
    dataset = load_dataset(args.data)
    slot_counts = args.slot_counts or config.get("slot_counts") or (1, 2, 4)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "ablation.json")
    table = run_ablation_suite(dataset, cfg, slot_counts=tuple(slot_counts),
                               recon_weight=args.recon_weight
                               if args.recon_weight is not None else 0.1,
                               out_path=out_path)
    for tag, entry in table.items():
        print(f"{tag}: H@10 = {entry['metrics']['H@10']:.2f}")
    print(f"full table at {out_path}")
    return 0


def _cmd_export_attention(args, config) -> int:
    params = _load_model(args)
    session = InferenceSession(params,
                               mode=args.mode or config.get("mode", "OVERWRITE"))
    session.ingest_many(args.items or [])
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "attention.csv")
    per_layer = args.per_layer or bool(config.get("per_layer", False))
    rows = export_attention(params, session, path, per_layer=per_layer)
    print(f"wrote {len(rows)} attention rows to {path}")
    return 0


def _cmd_verify(args, config) -> int:
    from .verify import run_all
    results = run_all(seed=args.seed if args.seed is not None else 0)
    width = max(len(name) for name, _, _ in results)
    failures = 0
    for name, ok, detail in results:
        mark = "ok " if ok else "FAIL"
        print(f"[{mark}] {name:<{width}}  {detail}")
        failures += 0 if ok else 1
    if failures:
        print(f"{failures} of {len(results)} checks failed")
        return 2
    print(f"all {len(results)} checks passed")
    return 0


# ------------------------------------------------------------------ parser

def _item_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated item "
                                         f"ids, got {text!r}")


def _int_list(text: str) -> list[int]:
    return _item_list(text)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=".", help="output directory")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trainer", choices=TRAINERS)
    p.add_argument("--mode", choices=("OVERWRITE", "APPEND"))
    for name in ("l-seg", "l-full", "c", "d", "n-layers", "n-heads",
                 "batch-size", "epochs", "patience", "valid-user-cap"):
        p.add_argument(f"--{name}", type=int, dest=name.replace("-", "_"))
    for name in ("lr", "weight-decay", "consistency-weight", "recon-weight",
                 "init-scale"):
        p.add_argument(f"--{name}", type=float, dest=name.replace("-", "_"))


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--params", required=True, help="R2PW weight file")
    p.add_argument("--manifest", help="manifest with the architecture "
                                      "(default: next to the weight file)")


def build_parser() -> _Parser:
    parser = _Parser(prog="rec2pm",
                     description="memory-compressed sequential recommender")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _add_common(p)
    for name in ("n-users", "seq-len", "catalog-size", "n-categories",
                 "prefs-per-user", "session-burst-len"):
        p.add_argument(f"--{name}", type=int, dest=name.replace("-", "_"))
    for name in ("long-term-weight", "noise-rate"):
        p.add_argument(f"--{name}", type=float, dest=name.replace("-", "_"))

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--data", required=True, help="JSONL dataset")
    _add_train_flags(p)

    p = sub.add_parser("evaluate", help="rank held-out items")
    _add_common(p)
    p.add_argument("--data", required=True)
    _add_model_flags(p)
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--mode", choices=("OVERWRITE", "APPEND"))
    p.add_argument("--target", choices=("test", "valid"))
    p.add_argument("--overlap", type=int)
    p.add_argument("--user-cap", type=int, dest="user_cap")

    p = sub.add_parser("infer", help="predict next items for a stream")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--items", type=_item_list, help="comma-separated ids")
    p.add_argument("--memory", help="R2PM memory file to resume from")
    p.add_argument("--save-memory", dest="save_memory")
    p.add_argument("--top-k", type=int, dest="top_k")
    p.add_argument("--mode", choices=("OVERWRITE", "APPEND"))

    p = sub.add_parser("bench", help="latency/storage comparison")
    _add_common(p)
    p.add_argument("--data", required=True)
    _add_model_flags(p)
    p.add_argument("--full-params", required=True, dest="full_params")
    p.add_argument("--full-manifest", dest="full_manifest")
    p.add_argument("--reps", type=int)
    p.add_argument("--user-cap", type=int, dest="user_cap")

    p = sub.add_parser("ablate", help="train/evaluate the comparison grid")
    _add_common(p)
    p.add_argument("--data", required=True)
    _add_train_flags(p)
    p.add_argument("--slot-counts", type=_int_list, dest="slot_counts")

    p = sub.add_parser("export-attention", help="attention weights as CSV")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--items", type=_item_list, help="comma-separated ids")
    p.add_argument("--per-layer", action="store_true", default=False,
                   dest="per_layer")
    p.add_argument("--mode", choices=("OVERWRITE", "APPEND"))

    p = sub.add_parser("verify", help="run the invariant checks")
    _add_common(p)
    return parser


_DISPATCH = {"gen-data": _cmd_gen_data, "train": _cmd_train,
             "evaluate": _cmd_evaluate, "infer": _cmd_infer,
             "bench": _cmd_bench, "ablate": _cmd_ablate,
             "export-attention": _cmd_export_attention,
             "verify": _cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        config = load_config(getattr(args, "config", None))
        if getattr(args, "seed", None) is None and "seed" in config:
            args.seed = config["seed"]
        return _DISPATCH[args.command](args, config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
