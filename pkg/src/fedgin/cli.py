"""``fedgin`` command line: gen-data, train, eval, reproduce.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import kernels
from .config import ConfigError, dump_config, federation_config, load_config
from .evalharness import (ExperimentSpec, MetricRow, MetricsReport, evaluate_volume, run_experiment, summary_markdown,
                          held_out_set, train_strategy, validation_set, write_metrics_csv)
from .serialize import load_checkpoint, save_checkpoint
from .synthdata import DOMAIN_IDS, ClientSpec, Volume, build_client_datasets, make_volume, read_dataset, write_dataset

log = logging.getLogger("fedgin")

AUG_CHOICES = ("none", "gin", "fourier", "dsbn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat 'section.key = value' config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config entry (repeatable)")
    common.add_argument("--out", type=Path, default=Path("."), help="directory for every output artifact")
    common.add_argument("--data-dir", type=Path, help="dataset directory written by gen-data")
    common.add_argument("--threads", type=int, help="client worker threads (default: number of clients)")
    common.add_argument("--quick", action="store_true", help="desk-scale preset (T=20, 8 volumes/client)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="fedgin", description="Federated cross-modality segmentation with GIN augmentation.")
    sub = parser.add_subparsers(dest="command", metavar="{gen-data,train,eval,reproduce}", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic train/val/test volumes")
    g.add_argument("--paired", action="store_true", help="render the same phantoms in every modality (debug only)")

    t = sub.add_parser("train", parents=[common], help="train one strategy and write checkpoints")
    t.add_argument("--strategy", choices=("local", "centralized", "federated"))
    t.add_argument("--aug", choices=AUG_CHOICES)
    t.add_argument("--modality", choices=sorted(DOMAIN_IDS), help="training modality for --strategy local")

    e = sub.add_parser("eval", parents=[common], help="3D Dice of a checkpoint on the held-out volumes")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--norm", choices=("batch", "dsbn"), help="normalization the checkpoint was trained with")

    sub.add_parser("reproduce", parents=[common], help="run the full local / centralized / federated matrix")
    return parser


# ---------------------------------------------------------------------------
# helpers

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, config: dict, seeds, artifacts, extra=None) -> Path:
    """Resolved config, seeds and artifact hashes; no timestamps so reruns stay byte-identical."""
    manifest = {
        "command": command,
        "config": dump_config(config).splitlines(),
        "seeds": list(seeds),
        "artifacts": {p.relative_to(out).as_posix(): _sha256(p) for p in sorted(artifacts)},
    }
    manifest.update(extra or {})
    path = out / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _repetition_seeds(config: dict) -> tuple:
    base = config["experiment"]["seed"]
    return tuple(base + s for s in config["experiment"]["seeds"])


def _client_specs(config: dict) -> list:
    d = config["data"]
    return [ClientSpec(f"client{m}", m, d["volumes_per_client"], d["seed"] + 10 * (i + 1))
            for i, m in enumerate(d["modalities"])]


def _spec_for(config: dict, strategy: str, aug: str, clients, label: str = "", seeds=None) -> ExperimentSpec:
    d = config["data"]
    fed = federation_config(config)
    if config["federation"]["threads"] == 0:
        fed = replace(fed, threads=max(1, len(clients)))
    return ExperimentSpec(
        strategy=strategy, augmentation="none" if aug == "dsbn" else aug,
        norm_mode="dsbn" if aug == "dsbn" else config["model"]["norm_mode"],
        clients=tuple(clients), test_volumes=d["test_volumes"], val_volumes=d["val_volumes"],
        seeds=tuple(seeds if seeds is not None else _repetition_seeds(config)), data_seed=d["seed"],
        grid=tuple(d["grid"]), federation=fed, transport=config["federation"]["transport"], label=label)


def _load_groups(data_dir: Path):
    train, test = {}, {}
    for key, vols in read_dataset(data_dir).items():
        for vol in vols:
            if vol.split == "train":
                train.setdefault(key, []).append(vol)
            elif vol.split == "test":
                test.setdefault(f"test{vol.modality}", []).append(vol)
    return train, test


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, config) -> int:
    out = args.data_dir or args.out
    out.mkdir(parents=True, exist_ok=True)
    specs = _client_specs(config)
    d = config["data"]
    if args.paired or d["paired"]:
        ref = specs[0]
        groups = {s.client_id: [make_volume(f"{s.client_id}-{i:03d}", s.modality, ref.seed, i, tuple(d["grid"]),
                                            "train", s.client_id) for i in range(s.n_volumes)] for s in specs}
    else:
        groups = build_client_datasets(specs, tuple(d["grid"]))
    spec = _spec_for(config, "federated", "none", specs) if len(specs) > 1 else None
    probe = spec or _spec_for(config, "local", "none", specs)
    groups.update(validation_set(probe, {s.modality for s in specs}))
    groups.update(held_out_set(probe))
    manifest = write_dataset(out, groups)
    files = [manifest] + sorted(out.glob("*.fgt"))
    _write_manifest(out, "gen-data", config, [d["seed"]], files, {"paired": bool(args.paired or d["paired"])})
    log.info("wrote %d volumes to %s", sum(len(v) for v in groups.values()), out)
    return 0


def cmd_train(args, config) -> int:
    strategy = args.strategy or config["experiment"]["strategy"]
    aug = args.aug or config["experiment"]["augmentation"]
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    data_dir = args.data_dir or (out if (out / "manifest.txt").exists() and any(out.glob("*.fgt")) else None)
    if data_dir is not None:
        train, _ = _load_groups(data_dir)
        specs = [ClientSpec(cid, vols[0].modality, len(vols), vols[0].seed) for cid, vols in sorted(train.items())]
    else:
        specs = _client_specs(config)
        train = build_client_datasets(specs, tuple(config["data"]["grid"]))
    if strategy == "local":
        modality = args.modality or specs[0].modality
        specs = [s for s in specs if s.modality == modality][:1]
        if not specs:
            raise UsageError(f"no training client with modality {modality}")
    seed = config["experiment"]["seed"]
    spec = _spec_for(config, strategy, aug, specs, seeds=(seed,))
    val = validation_set(spec, {s.modality for s in specs})
    result = train_strategy(spec, train, seed, val)
    final, best = out / "final.fgck", out / "best.fgck"
    save_checkpoint(final, result.final_params)
    save_checkpoint(best, result.best_params)
    history = out / "history.jsonl"
    with open(history, "w", encoding="utf-8", newline="\n") as fh:
        for event in result.history:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
    _write_manifest(out, "train", config, [seed], [final, best, history],
                    {"strategy": strategy, "augmentation": aug, "best_round": result.best_round,
                     "clients": [s.client_id for s in specs]})
    log.info("trained %s/%s for %d rounds; best round %d", strategy, aug, spec.federation.rounds, result.best_round)
    return 0


def cmd_eval(args, config) -> int:
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    params = load_checkpoint(args.checkpoint)
    norm = args.norm or ("dsbn" if any(".running_mean.d" in k for k in params) else "batch")
    cfg = replace(federation_config(config).unet, norm_mode=norm)
    if args.data_dir is not None:
        _, test = _load_groups(args.data_dir)
    else:
        test = held_out_set(_spec_for(config, "local", "none", _client_specs(config)[:1]))
    report = MetricsReport()
    seed = config["experiment"]["seed"]
    for group in sorted(test):
        for vol in test[group]:
            for c, d in evaluate_volume(params, cfg, vol.slices(), DOMAIN_IDS[vol.modality]).items():
                report.rows.append(MetricRow("eval", norm, vol.modality, c, vol.volume_id, seed, d,
                                             both_empty=not (vol.labels == c).any() and d == 1.0))
    csv_path = out / "metrics.csv"
    write_metrics_csv(report, csv_path)
    summary = out / "summary.md"
    summary.write_text(summary_markdown(report), encoding="utf-8")
    _write_manifest(out, "eval", config, [seed], [csv_path, summary], {"checkpoint": _sha256(args.checkpoint)})
    print(summary_markdown(report), end="")
    return 0


def reproduce_matrix(config: dict) -> list:
    """Every (strategy, method) configuration of the comparison table plus the scarce-modality sweep."""
    specs = _client_specs(config)
    by_mod = {s.modality: s for s in specs}
    matrix = [_spec_for(config, "local", "none", [by_mod[m]]) for m in sorted(by_mod)]
    for strategy in ("centralized", "federated"):
        for aug in AUG_CHOICES:
            matrix.append(_spec_for(config, strategy, aug, specs))
    d = config["data"]
    if "A" in by_mod and "B" in by_mod:
        scarce = replace(by_mod["B"], client_id="clientB-scarce", n_volumes=d["scarce_volumes"])
        matrix.append(_spec_for(config, "local", "none", [scarce], label="local-B-scarce"))
        for n_a in d["sweep_volumes"]:
            rich = replace(by_mod["A"], client_id=f"clientA-{n_a}", n_volumes=n_a)
            matrix.append(_spec_for(config, "federated", "gin", [rich, scarce], label=f"federated-B-scarce-A{n_a}"))
    return matrix


def _volumes_for(spec: ExperimentSpec, cache: dict) -> dict:
    out = {}
    for cs in spec.clients:
        key = (cs.modality, cs.seed, spec.grid)
        have = cache.get(key, [])
        if len(have) < cs.n_volumes:
            have = have + [make_volume(f"{cs.modality}{cs.seed}-{i:03d}", cs.modality, cs.seed, i, spec.grid)
                           for i in range(len(have), cs.n_volumes)]
            cache[key] = have
        out[cs.client_id] = [Volume(v.volume_id, v.modality, v.image, v.labels, v.seed, v.split, cs.client_id)
                             for v in have[:cs.n_volumes]]
    return out


def cmd_reproduce(args, config) -> int:
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    matrix = reproduce_matrix(config)
    test = held_out_set(matrix[0])
    cache: dict = {}
    report = MetricsReport()
    for spec in matrix:
        log.info("running %s / %s", spec.name, spec.method)
        report.extend(run_experiment(spec, _volumes_for(spec, cache), test))
    csv_path = out / "metrics.csv"
    tmp = out / "metrics.csv.partial"
    write_metrics_csv(report, tmp)
    os.replace(tmp, csv_path)
    summary = out / "summary.md"
    summary.write_text(summary_markdown(report), encoding="utf-8", newline="\n")
    _write_manifest(out, "reproduce", config, _repetition_seeds(config), [csv_path, summary],
                    {"experiments": [f"{s.name}/{s.method}" for s in matrix]})
    log.info("matrix finished in %.0f s", report.runtime)
    print(summary_markdown(report), end="")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "reproduce": cmd_reproduce}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_config(args.config, args.overrides, quick=args.quick)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            config["federation"]["threads"] = args.threads
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ConfigError, OSError) as exc:
        print(f"fedgin: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    log.debug("kernel backend: %s", kernels.backend())
    try:
        return COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"fedgin: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a structured runtime failure
        log.debug("failure", exc_info=True)
        print(f"fedgin: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
