"""Command-line entry point: ``fedinject {gen-data,train,eval,ablate}``.

Precedence for every setting is flag > config file > built-in default.
Exit codes: 0 success, 1 internal error, 2 bad config, 3 data problem,
4 checkpoint problem.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import evaluation as E
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, validate
from .data import (ConfigError, DatasetFormatError, PartitionedDataset, canonical_json,
                   generate_benchmark, partition_benchmark, read_dataset, write_dataset)
from .federated import split_state_tree, state_tree
from .params import ParamTree, StructureError

log = logging.getLogger("fedinject")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4
MODES = ("fine-tune", "zero-shot", "coverage")


class DataError(Exception):
    pass


class CheckpointError(Exception):
    pass


# ---------------------------------------------------------------- config + paths


def effective_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "jobs", None) is not None:
        cfg.federation.jobs = args.jobs
    if getattr(args, "variant", None) is not None:
        cfg.variant = args.variant
    validate(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(canonical_json(cfg.to_dict()) + "\n")
    return cfg


def checkpoint_path(out: Path, k: int) -> Path:
    return out / f"round_{k}.fkim"


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- data


def cmd_gen_data(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    spec = cfg.benchmark_spec()
    samples = generate_benchmark(spec, cfg.seed)
    data = partition_benchmark(spec, samples, cfg.federation.n_clients, cfg.seed)
    (out / "data").mkdir(parents=True, exist_ok=True)
    tasks = {}
    for t in spec.tasks:
        path = out / "data" / f"{t.id}.fkds"
        write_dataset(path, spec, t, samples[t.id])
        cell = data.cells[t.id]
        tasks[t.id] = {"file": f"data/{t.id}.fkds", "sha256": _sha(path), "role": t.role,
                       "count": len(samples[t.id]), "partition": cell.sizes(),
                       "clients": [len(c) for c in cell.clients]}
    manifest = {"seed": cfg.seed, "config_hash": cfg.hash(), "n_clients": data.n_clients,
                "tasks": tasks}
    path = out / "manifest"
    path.write_text(canonical_json(manifest) + "\n")
    return path


def load_data(cfg: RunConfig) -> PartitionedDataset:
    """Read the generated datasets under ``cfg.out`` and re-derive the partition."""
    out = Path(cfg.out)
    if not (out / "manifest").exists():
        raise DataError(f"no manifest in {out}; run gen-data first")
    manifest = json.loads((out / "manifest").read_text())
    if manifest["seed"] != cfg.seed:
        raise DataError(f"datasets were generated with seed {manifest['seed']}, not {cfg.seed}")
    spec = cfg.benchmark_spec()
    samples = {}
    for t in spec.tasks:
        path = out / "data" / f"{t.id}.fkds"
        if not path.exists():
            raise DataError(f"missing dataset file {path}")
        header, samples[t.id] = read_dataset(path)
        if header["task"] != t.to_dict():
            raise DataError(f"{path}: task definition differs from the configuration")
    return partition_benchmark(spec, samples, cfg.federation.n_clients, cfg.seed)


# ---------------------------------------------------------------- train


def _log_round(out: Path, state) -> None:
    line = {"round": state.round, "communication_rounds": state.communication_rounds,
            "server_first": state.server_losses[0] if state.server_losses else None,
            "server_last": state.server_losses[-1] if state.server_losses else None,
            "client_last": {str(c): v[-1] for c, v in sorted(state.client_losses.items()) if v}}
    with open(out / "losses.log", "a") as fh:
        fh.write(json.dumps(line, sort_keys=True) + "\n")


def _restore(cfg: RunConfig, data: PartitionedDataset, path: Path):
    tree = _read_checkpoint(path)
    try:
        state, peft, backbone = split_state_tree(tree)
    except StructureError as e:
        raise CheckpointError(f"{path}: {e}") from None
    vocab = E.build_vocab(cfg, data)
    server = E.build_server(cfg, data, vocab, backbone)
    try:
        server.peft.check_same_structure(peft)
        E.build_federation(cfg, data, server).initial_state().globals \
            .check_same_structure(state.globals)
    except StructureError as e:
        raise CheckpointError(f"{path} does not match the configured model: {e}") from None
    server.peft = peft
    return server, state


def _read_checkpoint(path: Path) -> ParamTree:
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        return load_checkpoint(path)
    except CheckpointFormatError as e:
        raise CheckpointError(f"{path}: {e}") from None


def cmd_train(cfg: RunConfig, resume: str | None = None) -> Path:
    out = Path(cfg.out)
    data = load_data(cfg)
    if resume is not None:
        server, state = _restore(cfg, data, Path(resume))
        fed = E.build_federation(cfg, data, server)
        if (out / "losses.log").exists():
            keep = [ln for ln in (out / "losses.log").read_text().splitlines()
                    if json.loads(ln)["round"] <= state.round]
            (out / "losses.log").write_text("".join(ln + "\n" for ln in keep))
    else:
        vocab = E.build_vocab(cfg, data)
        backbone, trace = E.pretrained_backbone(cfg, vocab)
        save_checkpoint(backbone, out / "backbone.fkim")
        server = E.build_server(cfg, data, vocab, backbone)
        fed = E.build_federation(cfg, data, server)
        state = fed.initial_state()
        save_checkpoint(state_tree(state, server), checkpoint_path(out, 0))
        (out / "losses.log").write_text("")
        log.info("pretraining loss %.4f -> %.4f", trace[0], trace[-1])

    def on_round(s):
        save_checkpoint(state_tree(s, server), checkpoint_path(out, s.round))
        _log_round(out, s)
        log.info("round %d done", s.round)

    state = fed.run(state, on_round=on_round)
    return checkpoint_path(out, state.round)


# ---------------------------------------------------------------- eval


def load_artifacts(cfg: RunConfig, data: PartitionedDataset, path: Path) -> E.Artifacts:
    tree = _read_checkpoint(path)
    if "meta/round" not in tree:
        # a bare backbone: the model before injection
        vocab = E.build_vocab(cfg, data)
        try:
            tree.check_same_structure(_empty_backbone(cfg, vocab))
        except StructureError as e:
            raise CheckpointError(f"{path} is not a backbone for this config: {e}") from None
        return E.backbone_alone(cfg, data, vocab, tree)
    server, state = _restore(cfg, data, path)
    return E.Artifacts(cfg, cfg.variant, data, server, state)


def _empty_backbone(cfg: RunConfig, vocab) -> ParamTree:
    import numpy as np

    from .foundation import init_backbone

    tree = init_backbone(E.foundation_config(cfg, vocab), np.random.default_rng(0))
    tree.freeze()
    return tree


def latest_checkpoint(out: Path) -> Path:
    found = sorted(out.glob("round_*.fkim"), key=lambda p: int(p.stem.split("_")[1]))
    if not found:
        raise CheckpointError(f"no round_*.fkim in {out}")
    return found[-1]


def cmd_eval(cfg: RunConfig, mode: str, checkpoint: str | None = None) -> Path:
    out = Path(cfg.out)
    data = load_data(cfg)
    path = Path(checkpoint) if checkpoint else latest_checkpoint(out)
    art = load_artifacts(cfg, data, path)
    if mode == "fine-tune":
        text = E.fine_tune_eval(art).to_text()
    elif mode == "zero-shot":
        text = E.zero_shot_eval(art).to_text()
    else:
        text = json.dumps({"variant": art.variant, "seed": cfg.seed, "config_hash": cfg.hash(),
                           "coverage": E.coverage(art).to_dict()}, sort_keys=True, indent=1) + "\n"
    return E.write_report(out, f"{mode}-{cfg.hash()}", art.variant, text)


# ---------------------------------------------------------------- ablate


def cmd_ablate(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    data = load_data(cfg)
    vocab = E.build_vocab(cfg, data)
    backbone, _ = E.pretrained_backbone(cfg, vocab)
    run_id = f"ablate-{cfg.hash()}"
    results = {}
    for v in E.VARIANT_ORDER:
        log.info("variant %s", v)
        results[v] = E.run_variant(v, cfg, data, (vocab, backbone))
        E.write_report(out, run_id, v, results[v].report_text())
    root = out / "reports" / run_id
    (root / "summary.csv").write_text(E.summary_table(
        {v: r.fine_tune for v, r in results.items()}))
    (root / "zero_shot.csv").write_text(E.summary_table(
        {v: r.zero_shot for v, r in results.items()}))
    table = E.ablation_table(results)
    (root / "ablation.csv").write_text(table)
    sys.stderr.write(table)
    return root / "ablation.csv"


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedinject", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output root (overrides config 'out')")
    common.add_argument("--jobs", type=int, help="parallel client workers")
    common.add_argument("--variant", help="model variant (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic benchmark")
    tr = sub.add_parser("train", parents=[common], help="run the federated rounds")
    tr.add_argument("--resume", metavar="CHECKPOINT", help="continue from a round checkpoint")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--mode", choices=MODES, default="fine-tune")
    ev.add_argument("--checkpoint", help="defaults to the latest round checkpoint")
    sub.add_parser("ablate", parents=[common], help="train and compare all variants")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        if args.command == "gen-data":
            path = cmd_gen_data(cfg)
        elif args.command == "train":
            path = cmd_train(cfg, args.resume)
        elif args.command == "eval":
            path = cmd_eval(cfg, args.mode, args.checkpoint)
        else:
            path = cmd_ablate(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetFormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except Exception as e:  # noqa: BLE001 - last-resort exit code
        log.exception("internal error")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
