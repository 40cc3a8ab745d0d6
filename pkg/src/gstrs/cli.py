"""Command-line pipeline: synth -> cluster -> train -> eval -> gradcheck.

Exit codes: 0 success, 1 check or data failure, 2 usage/config error.
Every command is deterministic given its flags and seed.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .data import (
    DatasetManifest,
    SynthSpec,
    generate_synthetic,
    load_features,
    load_manifest,
    save_features,
    save_manifest,
)
from .evaluation import classification_accuracy, evaluate_retrieval, save_report_csv
from .grouping import WithinClassKMeans, load_group_assignments, save_group_assignments
from .model import embed, load_checkpoint, save_checkpoint
from .numerics import PcaReducer
from .trainer import LOSS_MODES, GsTrsEmbedder
from .checks import run_gradient_suite


class ConfigError(Exception):
    """Bad run-config contents (treated as a usage error, exit 2)."""


# ---------------------------------------------------------------------------
# run config: key=value file with documented defaults; unknown keys rejected

def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_opt_int(s: str):
    return None if s.lower() in ("none", "") else int(s)


REQUIRED = object()  # sentinel: key has no default and must be present

CONFIG_SCHEMA: dict[str, tuple] = {
    # key: (parser, default)
    "features": (str, REQUIRED),
    "manifest": (str, REQUIRED),
    "out_checkpoint": (str, REQUIRED),
    "out_log": (str, REQUIRED),
    "groups_csv": (str, ""),
    "loss": (str, "gstrs_wmean"),
    "alpha": (float, 1.0),
    "alpha1": (float, 1.0),
    "alpha2": (float, 0.3),
    "omega": (float, 0.5),
    "learning_rate": (float, 0.05),
    "momentum": (float, 0.9),
    "epochs": (int, 50),
    "embed_dim": (int, 16),
    "hidden_dim": (int, 0),
    "normalize": (_parse_bool, True),
    "normalize_before_loss": (_parse_bool, True),
    "frozen_centers": (_parse_bool, False),
    "classes_per_batch": (int, 4),
    "groups_per_class": (int, 2),
    "samples_per_group": (int, 4),
    "negative_pool_per_class": (_parse_opt_int, None),
    "n_groups": (int, 5),
    "pca_dim": (_parse_opt_int, 64),
    "kmeans_restarts": (int, 5),
    "kmeans_max_iters": (int, 100),
    "regroup_every_n_epochs": (int, 0),
    "seed": (int, 0),
}


def load_run_config(path: str) -> dict:
    """Parse a key=value config file against the schema."""
    values = {k: default for k, (_, default) in CONFIG_SCHEMA.items()}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        parser_fn, _ = CONFIG_SCHEMA[key]
        try:
            values[key] = parser_fn(raw)
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from None
    missing = [k for k, v in values.items() if v is REQUIRED]
    if missing:
        raise ConfigError(f"{path}: missing required keys: {', '.join(missing)}")
    if values["loss"] not in LOSS_MODES:
        raise ConfigError(
            f"{path}: invalid loss mode {values['loss']!r}; choose from {', '.join(LOSS_MODES)}"
        )
    return values


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_classes=args.classes,
        groups_per_class=args.groups,
        samples_per_group=args.per_group,
        raw_dim=args.dim,
        class_separation=args.class_sep,
        group_separation=args.group_sep,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    X, manifest = generate_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    save_features(os.path.join(args.out, "features.bin"), X)
    save_manifest(os.path.join(args.out, "manifest.csv"), manifest)
    print(
        f"wrote {len(manifest)} samples ({spec.n_classes} classes x "
        f"{spec.groups_per_class} groups x {spec.samples_per_group}/group, "
        f"dim {spec.raw_dim}) to {args.out}"
    )
    return 0


def cmd_cluster(args) -> int:
    X = load_features(args.features)
    manifest = load_manifest(args.manifest)
    if len(manifest) != X.shape[0]:
        raise ValueError(
            f"manifest has {len(manifest)} rows but features have {X.shape[0]}"
        )
    reduced = X
    if args.pca_dim is not None:
        k = min(args.pca_dim, X.shape[1])
        reduced = PcaReducer(n_components=k).fit(X).transform(X)
    km = WithinClassKMeans(n_groups=args.groups, seed=args.seed)
    km.fit(reduced, manifest.classes)
    save_group_assignments(args.out, manifest.sample_ids, manifest.classes, km.labels_)
    print(f"clustered {len(manifest)} samples into {args.groups} groups/class -> {args.out}")
    return 0


def _training_rows(manifest: DatasetManifest) -> np.ndarray:
    """Training pool: every row not held out as a query."""
    return np.flatnonzero(manifest.roles != "query")


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    X = load_features(cfg["features"])
    manifest = load_manifest(cfg["manifest"])
    if len(manifest) != X.shape[0]:
        raise ValueError(
            f"manifest has {len(manifest)} rows but features have {X.shape[0]}"
        )
    rows = _training_rows(manifest)
    if rows.size == 0:
        raise ValueError("no training rows (every row has role=query)")
    y = manifest.classes[rows]

    groups = None
    if cfg["groups_csv"]:
        table = load_group_assignments(cfg["groups_csv"])
        try:
            groups = np.array([table[int(sid)][1] for sid in manifest.sample_ids[rows]])
        except KeyError as e:
            raise ValueError(f"groups_csv missing sample_id {e.args[0]}") from None
    elif np.all(manifest.groups[rows] >= 0):
        groups = manifest.groups[rows]
    # else: leave None, the trainer clusters internally

    est = GsTrsEmbedder(
        embed_dim=cfg["embed_dim"],
        hidden_dim=cfg["hidden_dim"],
        normalize=cfg["normalize"],
        loss_mode=cfg["loss"],
        alpha=cfg["alpha"],
        alpha1=cfg["alpha1"],
        alpha2=cfg["alpha2"],
        omega=cfg["omega"],
        learning_rate=cfg["learning_rate"],
        momentum=cfg["momentum"],
        epochs=cfg["epochs"],
        classes_per_batch=cfg["classes_per_batch"],
        groups_per_class=cfg["groups_per_class"],
        samples_per_group=cfg["samples_per_group"],
        negative_pool_per_class=cfg["negative_pool_per_class"],
        n_groups=cfg["n_groups"],
        pca_dim=cfg["pca_dim"],
        kmeans_restarts=cfg["kmeans_restarts"],
        kmeans_max_iters=cfg["kmeans_max_iters"],
        regroup_every_n_epochs=cfg["regroup_every_n_epochs"],
        normalize_before_loss=cfg["normalize_before_loss"],
        frozen_centers=cfg["frozen_centers"],
        seed=cfg["seed"],
    )
    est.fit(X[rows], y, groups=groups)
    save_checkpoint(cfg["out_checkpoint"], est.model_, est.head_)
    with open(cfg["out_log"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "L_softmax", "L_inter", "L_intra", "L_total"])
        for row in est.history_:
            writer.writerow(
                [
                    row["epoch"],
                    repr(row["L_softmax"]),
                    repr(row["L_inter"]),
                    repr(row["L_intra"]),
                    repr(row["L_total"]),
                ]
            )
    final = est.history_[-1]["L_total"] if est.history_ else float("nan")
    print(
        f"trained {cfg['loss']} for {cfg['epochs']} epochs on {rows.size} samples; "
        f"final L_total {final:.6f}; checkpoint -> {cfg['out_checkpoint']}"
    )
    return 0


def cmd_eval(args) -> int:
    model, head = load_checkpoint(args.checkpoint)
    X = load_features(args.features)
    manifest = load_manifest(args.manifest)
    if len(manifest) != X.shape[0]:
        raise ValueError(
            f"manifest has {len(manifest)} rows but features have {X.shape[0]}"
        )
    q_rows = manifest.rows_with_role("query")
    g_rows = manifest.rows_with_role("gallery")
    if q_rows.size == 0 or g_rows.size == 0:
        raise ValueError("manifest needs query and gallery roles (run split-roles first)")
    from .model import embed  # local import keeps module load light

    topk = [int(k) for k in args.topk.split(",") if k]
    report = evaluate_retrieval(
        embed(model, X[q_rows]),
        manifest.classes[q_rows],
        embed(model, X[g_rows]),
        manifest.classes[g_rows],
        topk=topk,
        max_rank=args.max_rank,
        query_ids=manifest.sample_ids[q_rows],
        gallery_ids=manifest.sample_ids[g_rows],
        exclude_identical_id=args.exclude_identical_id,
    )
    classes = np.array(manifest.class_list)
    if classes.size == head.n_classes:
        label_of = {c: i for i, c in enumerate(classes)}
        labels = np.array([label_of[c] for c in manifest.classes[q_rows]])
        from .evaluation import classification_accuracy

        report.classification_accuracy = classification_accuracy(model, head, X[q_rows], labels)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        save_report_csv(os.path.join(args.out, "report.csv"), report)
    print(report.format_table())
    return 0


def cmd_split_roles(args) -> int:
    from .data import split_roles

    manifest = load_manifest(args.manifest)
    out = split_roles(manifest, args.query_fraction, args.seed)
    save_manifest(args.out, out)
    n_q = int(np.sum(out.roles == "query"))
    print(f"assigned {n_q} query and {len(out) - n_q} gallery rows -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_gradient_suite(
        seed=args.seed,
        trials=args.trials,
        step=args.step,
        tolerance=args.tolerance,
        inject_fault=args.inject_fault,
    )
    ok = True
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        ok &= rep.passed
        print(
            f"{status}  {rep.family:<26} max rel err {rep.max_rel_error:.3e} "
            f"({rep.n_instances} instances, {rep.n_coords_checked} coords, "
            f"{rep.n_coords_unstable} kink-unstable excluded)"
        )
    return 0 if ok else 1


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gstrs",
        description="Group-sensitive triplet metric learning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multimodal dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--groups", type=int, default=3)
    p.add_argument("--per-group", type=int, default=20)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--class-sep", type=float, default=8.0)
    p.add_argument("--group-sep", type=float, default=4.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cluster", help="group each class by k-means")
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--groups", type=int, default=5)
    p.add_argument("--pca-dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output group CSV")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("split-roles", help="assign query/gallery roles per class")
    p.add_argument("--manifest", required=True)
    p.add_argument("--query-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output manifest CSV")
    p.set_defaults(func=cmd_split_roles)

    p = sub.add_parser("train", help="train an embedding from a config file")
    p.add_argument("--config", required=True, help="key=value run config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval/ReID metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--topk", default="1,5", help="comma-separated precision cutoffs")
    p.add_argument("--max-rank", type=int, default=20)
    p.add_argument("--exclude-identical-id", action="store_true")
    p.add_argument("--out", default="", help="directory for report.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument(
        "--inject-fault",
        action="store_true",
        help="scale one gradient by 1.01 (self-test: the run must fail)",
    )
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gradcheck" and args.trials < 1:
        parser.error("--trials must be >= 1")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
