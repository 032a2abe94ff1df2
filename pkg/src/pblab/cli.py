"""Command-line entry point: ``pblab <command> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import experiment as X
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, dump_config, load_config
from .game import aux_set, score_examples, victim_config, victim_data, victim_split
from .mia import AttackResult, ShadowEnsemble, records_from, train_shadows, write_records_csv
from .optim import train
from .poison import poison_train

log = logging.getLogger("pblab")


class CLIError(RuntimeError):
    pass


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _seed_dir(cfg, seed) -> Path:
    d = cfg.out_dir / f"seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _pretrained(cfg):
    path = cfg.out_dir / "pretrained.pbck"
    if path.exists():
        return load_checkpoint(path)
    log.info("no pretrained checkpoint at %s; training one", path)
    model = X.pretrain_model(cfg)
    save_checkpoint(model, path)
    return model


def _start_model(cfg, seed, which: str):
    if which == "pretrained":
        return _pretrained(cfg)
    path = _seed_dir(cfg, seed) / "poisoned.pbck"
    if not path.exists():
        raise CLIError(f"{path} not found; run the poison command first")
    return load_checkpoint(path)


def _spec(cfg, seed, which="pretrained"):
    sd = X.seed_data(cfg, seed)
    return sd, X.game_spec(cfg, sd, 2 if which == "poisoned" else 1)


# --- commands -------------------------------------------------------------------


def cmd_gen_data(cfg, args):
    seed = _seed(args, cfg)
    sd = X.seed_data(cfg, seed)
    d = _seed_dir(cfg, seed)
    if cfg.kind == "classifier":
        np.savez(d / "universal.npz", x=sd.universal.x, y=sd.universal.y, ids=sd.universal.ids)
        np.savez(d / "heldout.npz", x=sd.heldout.x, y=sd.heldout.y, ids=sd.heldout.ids)
    else:
        from .data import decode

        with (d / "canaries.csv").open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["example_id", "text"])
            for i, s in zip(sd.universal.ids, sd.universal.seqs):
                w.writerow([int(i), decode(s)])
        (d / "background.txt").write_text("\n".join(decode(s) for s in sd.background.seqs))
    np.savetxt(d / "targets.txt", sd.target_ids, fmt="%d")
    print(f"wrote data for seed {seed} to {d}")


def cmd_pretrain(cfg, args):
    model = X.pretrain_model(cfg)
    path = save_checkpoint(model, cfg.out_dir / "pretrained.pbck")
    data = X.seed_data(cfg, cfg.seeds[0])
    from .optim import heldout_utility

    print(f"pretrained {cfg.kind}: heldout utility {heldout_utility(model, data.heldout):.4f} -> {path}")


def cmd_poison(cfg, args):
    if cfg.poison is None:
        raise CLIError("poisoning is disabled in this config")
    seed = _seed(args, cfg)
    base = _pretrained(cfg)
    sd, spec = _spec(cfg, seed, "poisoned")
    targets = sd.universal.subset(sd.universal.positions(sd.target_ids))
    model, report = poison_train(base, aux_set(spec), targets, cfg.poison, heldout=sd.heldout)
    d = _seed_dir(cfg, seed)
    save_checkpoint(model, d / "poisoned.pbck")
    (d / "poison_report.json").write_text(json.dumps(asdict(report), indent=1))
    print(f"utility {report.utility_before:.4f} -> {report.utility_after:.4f}; "
          f"target loss {report.target_loss_before:.4f} -> {report.target_loss_after:.4f}")


def cmd_finetune(cfg, args):
    seed = _seed(args, cfg)
    model = _start_model(cfg, seed, args.start)
    sd, spec = _spec(cfg, seed, args.start)
    pos = victim_split(spec)
    victim, _ = train(model, victim_data(spec, pos), victim_config(spec))
    d = _seed_dir(cfg, seed)
    save_checkpoint(victim, d / f"victim_{args.start}.pbck")
    np.savetxt(d / "members.txt", sd.universal.ids[pos], fmt="%d")
    from .optim import heldout_utility

    print(f"victim from {args.start}: heldout utility {heldout_utility(victim, sd.heldout):.4f}")


def cmd_shadows(cfg, args):
    seed = _seed(args, cfg)
    model = _start_model(cfg, seed, args.start)
    sd, spec = _spec(cfg, seed, args.start)
    ens = train_shadows(model, sd.universal, spec.shadows, spec.trainer, (seed, "shadows"), fit_set=spec.fit_set)
    d = _seed_dir(cfg, seed) / f"shadows_{args.start}"
    d.mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(ens.models):
        save_checkpoint(m, d / f"shadow_{k:02d}.pbck")
    np.save(d / "masks.npy", ens.masks)
    print(f"trained {ens.k} shadows -> {d}")


def cmd_attack(cfg, args):
    seed = _seed(args, cfg)
    d = _seed_dir(cfg, seed)
    sd, spec = _spec(cfg, seed, args.start)
    vpath = d / f"victim_{args.start}.pbck"
    if not vpath.exists():
        raise CLIError(f"{vpath} not found; run the finetune command first")
    victim = load_checkpoint(vpath)
    ens = None
    if spec.attack == "lira":
        sdir = d / f"shadows_{args.start}"
        if not (sdir / "masks.npy").exists():
            raise CLIError(f"no shadows in {sdir}; run the shadows command first")
        masks = np.load(sdir / "masks.npy")
        models = [load_checkpoint(p) for p in sorted(sdir.glob("shadow_*.pbck"))]
        ens = ShadowEnsemble(models, masks, spec.trainer, np.asarray(sd.universal.ids))
    targets = sd.universal.subset(sd.universal.positions(sd.target_ids))
    scores = score_examples(spec, victim, ens, targets)
    members = np.isin(sd.target_ids, sd.universal.ids[victim_split(spec)])
    res = AttackResult.from_records(args.start, records_from(sd.target_ids, scores, members, spec.attack))
    write_records_csv(res.records, d / f"scores_{args.start}.csv")
    print(f"{args.start}: TPR@1%FPR {res.tpr_at_1pct:.4f}  AUC {res.auc:.4f}")


def cmd_game(cfg, args):
    seed = _seed(args, cfg)
    rows = X.run_seed(cfg, seed, _pretrained(cfg), cfg.out_dir)
    for r in rows:
        print(f"seed {seed} {r.arm:8s} TPR@1%FPR {r.tpr_at_1pct:.4f}  AUC {r.auc:.4f}  "
              f"utility {r.utility_before:.4f} -> {r.utility_after:.4f}  game acc {r.game_accuracy:.3f}")


def cmd_probe_params(cfg, args):
    if cfg.kind != "lm":
        raise CLIError("probe-params runs on the lm config (use --kind lm)")
    rep = X.param_probe(cfg, _pretrained(cfg), _seed(args, cfg))
    out = cfg.out_dir / "probes"
    out.mkdir(parents=True, exist_ok=True)
    with (out / "param_overlap.csv").open("w", newline="") as f:
        csv.writer(f).writerows(rep.rows())
    (out / "param_summary.txt").write_text(rep.summary() + "\n")
    print(rep.summary())


def cmd_probe_neurons(cfg, args):
    if cfg.kind != "lm":
        raise CLIError("probe-neurons runs on the lm config (use --kind lm)")
    rep = X.neuron_probe(cfg, _pretrained(cfg), _seed(args, cfg), args.layer)
    out = cfg.out_dir / "probes"
    out.mkdir(parents=True, exist_ok=True)
    (out / "neuron_summary.txt").write_text(rep.summary() + "\n")
    print(rep.summary())


def cmd_report(cfg, args):
    if args.bundle:
        bundle = X.ResultsBundle.from_json(Path(args.bundle).read_text())
        if not bundle.runs:
            raise CLIError("bundle has no runs")
    else:
        bundle = X.run_experiment(cfg, _pretrained(cfg), threads=args.threads, write=True)
    paths = X.emit_report(bundle, args.format, cfg.out_dir)
    print(X.markdown_table(bundle))
    for p in paths:
        print(f"wrote {p}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "write the per-seed datasets and target ids"),
    "pretrain": (cmd_pretrain, "train the clean pre-trained model"),
    "poison": (cmd_poison, "poison the pre-trained model for a seed's targets"),
    "finetune": (cmd_finetune, "fine-tune a victim from the clean or poisoned model"),
    "shadows": (cmd_shadows, "train the shadow ensemble"),
    "attack": (cmd_attack, "score the targets against a fine-tuned victim"),
    "game": (cmd_game, "play the clean and poisoned games for one seed"),
    "probe-params": (cmd_probe_params, "parameter-change membership probe"),
    "probe-neurons": (cmd_probe_neurons, "knowledge-neuron attribution, amplification and exposure"),
    "report": (cmd_report, "run every seed and write csv/json/markdown reports"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--kind", choices=["classifier", "lm"], help="built-in defaults when no config is given")
    common.add_argument("--seed", type=int, help="seed for single-seed commands (default: first config seed)")
    common.add_argument("--out", type=Path, help="output directory (PBL_OUT overrides)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for independent runs")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="pblab", description="Privacy-backdoor experiments at desk scale.", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, parents=[common])
        if name in ("finetune", "shadows", "attack"):
            sp.add_argument("--from", dest="start", choices=["pretrained", "poisoned"], default="poisoned")
        if name == "probe-neurons":
            sp.add_argument("--layer", type=int)
        if name == "report":
            sp.add_argument("--format", nargs="+", default=["csv", "json", "markdown"],
                            choices=["csv", "json", "markdown"])
            sp.add_argument("--bundle", type=Path, help="re-emit reports from an existing bundle.json")
        if name == "pretrain":
            sp.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.kind)
    except (ConfigError, OSError) as e:
        print(f"pblab: config: {e}", file=sys.stderr)
        return 2
    if args.out is not None and not os.environ.get("PBL_OUT"):
        cfg.out = str(args.out)
    if getattr(args, "dump_config", False):
        print(dump_config(cfg))
        return 0
    fn = COMMANDS[args.command][0]
    try:
        fn(cfg, args)
    except X.StageError as e:
        print(f"pblab: {args.command}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - surface any failure with the stage name
        print(f"pblab: {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
