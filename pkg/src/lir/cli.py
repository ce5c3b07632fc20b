"""Command-line front end: gen, train, eval, and score subcommands.

A single key=value config file drives every stage; unknown keys are
rejected and relative paths resolve against the config file's directory.
All artifacts (task files, checkpoints, train logs, reports, the SVG
layer profile, manifests) are byte-reproducible for a fixed config, and
every run directory carries a manifest with the config hash, seeds, and
file-format versions. Verbosity comes from the LIR_LOG environment
variable (debug / info / warning).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    ENERGY_FORMAT_VERSION,
    EnergyMatrix,
    TaskSpec,
    extract_energies,
    extract_logits,
    gen_task,
    read_energy_file,
    write_energy_file,
)
from .detectors import (
    DETECTOR_FORMAT_VERSION,
    EboLogitsDetector,
    MspDetector,
    VaeConfig,
    bhl,
    classify,
    fit_knn,
    fit_md,
    fit_vae,
    load_detector,
    save_detector,
)
from .metrics import accuracy, auroc, fpr_at_tpr
from .nets import NET_FORMAT_VERSION, load_net, save_net
from .report import EvalRow, write_layer_profile_svg, write_report_csv, write_summary_json
from .training import CeConfig, EBO_MARGINS, REboConfig, calibrate_margins, train

logger = logging.getLogger("lir")

KNOWN_DETECTORS = ("ebo", "msp", "layer", "bhl", "md", "knn", "vae")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


@dataclass
class RunConfig:
    out_dir: Path
    seeds: tuple[int, ...] = (0,)
    task_seed: int = 0
    task_input_dim: int = 2
    task_n_classes: int = 3
    task_radius: float = 5.0
    task_n_train: int = 2000
    task_n_eval: int = 500
    net_hidden_dims: tuple[int, ...] = (64, 64)
    train_loss: str = "ce"
    train_epochs: int = 60
    train_batch_size: int = 64
    train_lr: float = 0.05
    train_momentum: float = 0.9
    train_lam: float = 0.05
    train_margins: str = "calibrated"
    train_layer_set: str = "all"
    eval_detectors: tuple[str, ...] = KNOWN_DETECTORS
    eval_knn_k: int = 0
    eval_include_logits: bool = False
    eval_vae_epochs: int = 200
    eval_vae_lr: float = 1e-3
    config_sha256: str = ""
    config_dir: Path = Path(".")


_KEY_MAP = {
    "out_dir": "out_dir",
    "seeds": "seeds",
    "task.seed": "task_seed",
    "task.input_dim": "task_input_dim",
    "task.n_classes": "task_n_classes",
    "task.radius": "task_radius",
    "task.n_train": "task_n_train",
    "task.n_eval": "task_n_eval",
    "net.hidden_dims": "net_hidden_dims",
    "train.loss": "train_loss",
    "train.epochs": "train_epochs",
    "train.batch_size": "train_batch_size",
    "train.lr": "train_lr",
    "train.momentum": "train_momentum",
    "train.lam": "train_lam",
    "train.margins": "train_margins",
    "train.layer_set": "train_layer_set",
    "eval.detectors": "eval_detectors",
    "eval.knn_k": "eval_knn_k",
    "eval.include_logits": "eval_include_logits",
    "eval.vae_epochs": "eval_vae_epochs",
    "eval.vae_lr": "eval_vae_lr",
}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected boolean, got {raw!r}")


def _parse_int_tuple(raw: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(p.strip()) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}")


def load_config(path) -> RunConfig:
    """Parse a key=value config file; unknown keys are an error."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    cfg = RunConfig(out_dir=Path("."))
    cfg.config_sha256 = hashlib.sha256(text.encode()).hexdigest()
    cfg.config_dir = path.resolve().parent
    seen_out = False
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _KEY_MAP:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        attr = _KEY_MAP[key]
        current = getattr(cfg, attr)
        try:
            if attr == "out_dir":
                cfg.out_dir = Path(raw)
                seen_out = True
            elif attr == "seeds":
                cfg.seeds = _parse_int_tuple(raw, key)
            elif attr in ("net_hidden_dims",):
                cfg.net_hidden_dims = _parse_int_tuple(raw, key)
            elif attr == "eval_detectors":
                names = tuple(p.strip() for p in raw.split(",") if p.strip())
                bad = [n for n in names if n not in KNOWN_DETECTORS]
                if bad:
                    raise ConfigError(f"{key}: unknown detectors {bad}")
                cfg.eval_detectors = names
            elif isinstance(current, bool):
                setattr(cfg, attr, _parse_bool(raw, key))
            elif isinstance(current, int):
                setattr(cfg, attr, int(raw))
            elif isinstance(current, float):
                setattr(cfg, attr, float(raw))
            else:
                setattr(cfg, attr, raw)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {key}: {exc}")
    if not seen_out:
        raise ConfigError(f"{path}: missing required key out_dir")
    if cfg.train_loss not in ("ce", "rebo"):
        raise ConfigError(f"train.loss must be 'ce' or 'rebo', got {cfg.train_loss!r}")
    if not cfg.seeds:
        raise ConfigError("seeds must be nonempty")
    cfg.out_dir = (cfg.config_dir / cfg.out_dir).resolve()
    return cfg


def _task_spec(cfg: RunConfig) -> TaskSpec:
    return TaskSpec(
        input_dim=cfg.task_input_dim,
        n_classes=cfg.task_n_classes,
        radius=cfg.task_radius,
        n_train=cfg.task_n_train,
        n_eval=cfg.task_n_eval,
    )


def _layer_set(cfg: RunConfig, n_taps: int) -> frozenset | None:
    if cfg.train_layer_set == "all":
        return None
    return frozenset(_parse_int_tuple(cfg.train_layer_set, "train.layer_set"))


def _margins(cfg: RunConfig, task, dims_hidden) -> tuple[float, float]:
    if cfg.train_margins == "ebo":
        return EBO_MARGINS
    if cfg.train_margins == "calibrated":
        from .nets import init_net

        ss = np.random.SeedSequence(cfg.seeds[0] if cfg.seeds else 0)
        init_ss, _, _ = ss.spawn(3)
        net0 = init_net([task.input_dim, *dims_hidden, task.n_classes], seed=init_ss)
        return calibrate_margins(net0, task)
    parts = cfg.train_margins.split(",")
    if len(parts) != 2:
        raise ConfigError(
            f"train.margins must be 'ebo', 'calibrated' or 'm_in,m_out', got {cfg.train_margins!r}"
        )
    return float(parts[0]), float(parts[1])


def _write_manifest(cfg: RunConfig) -> None:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_sha256": cfg.config_sha256,
        "seeds": list(cfg.seeds),
        "formats": {
            "lire": ENERGY_FORMAT_VERSION,
            "lird": DETECTOR_FORMAT_VERSION,
            "lirn": NET_FORMAT_VERSION,
        },
        "package_version": __version__,
    }
    with open(cfg.out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg: RunConfig) -> None:
    task = gen_task(_task_spec(cfg), cfg.task_seed)
    task_dir = cfg.out_dir / "task"
    task_dir.mkdir(parents=True, exist_ok=True)
    n_train = task.train_x.shape[0]
    n_eval = task.test_x.shape[0]
    splits = {
        "train_id": EnergyMatrix(task.train_x, np.zeros(n_train, np.uint8), task.train_y),
        "test_id": EnergyMatrix(task.test_x, np.zeros(n_eval, np.uint8), task.test_y),
        "seen_ood": EnergyMatrix(task.seen_ood_x, np.ones(n_train, np.uint8)),
        "near_ood": EnergyMatrix(task.near_ood_x, np.ones(n_eval, np.uint8)),
        "far_ood": EnergyMatrix(task.far_ood_x, np.ones(n_eval, np.uint8)),
    }
    for name, x in task.corrupted_id.items():
        splits[f"corrupted_{name}"] = EnergyMatrix(x, np.ones(n_eval, np.uint8))
    for name, m in splits.items():
        write_energy_file(m, task_dir / f"{name}.lire")
    meta = {
        "input_dim": task.input_dim,
        "n_classes": task.n_classes,
        "radius": task.radius,
        "seed": cfg.task_seed,
        "splits": sorted(splits),
        "note": "feature matrices stored in the LIRE container (values = raw features)",
    }
    with open(task_dir / "task.json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")
    _write_manifest(cfg)
    logger.info("wrote task with %d splits to %s", len(splits), task_dir)


def _seed_dir(cfg: RunConfig, seed: int) -> Path:
    return cfg.out_dir / f"seed_{seed}"


def cmd_train(cfg: RunConfig) -> None:
    task = gen_task(_task_spec(cfg), cfg.task_seed)
    for seed in cfg.seeds:
        if cfg.train_loss == "rebo":
            m_in, m_out = _margins(cfg, task, cfg.net_hidden_dims)
            tc = REboConfig(
                m_in=m_in,
                m_out=m_out,
                lam=cfg.train_lam,
                layer_set=_layer_set(cfg, len(cfg.net_hidden_dims) + 1),
                epochs=cfg.train_epochs,
                batch_size=cfg.train_batch_size,
                lr=cfg.train_lr,
                momentum=cfg.train_momentum,
                seed=seed,
                hidden_dims=cfg.net_hidden_dims,
            )
        else:
            tc = CeConfig(
                epochs=cfg.train_epochs,
                batch_size=cfg.train_batch_size,
                lr=cfg.train_lr,
                momentum=cfg.train_momentum,
                seed=seed,
                hidden_dims=cfg.net_hidden_dims,
            )
        net, log = train(task, tc)
        out = _seed_dir(cfg, seed)
        out.mkdir(parents=True, exist_ok=True)
        save_net(net, out / f"model_{cfg.train_loss}.lirn")
        log.to_csv(out / f"trainlog_{cfg.train_loss}.csv")
        logger.info("seed %d: final train acc %.4f", seed, log.train_acc[-1])
    _write_manifest(cfg)


def cmd_eval(cfg: RunConfig) -> None:
    task = gen_task(_task_spec(cfg), cfg.task_seed)
    for seed in cfg.seeds:
        out = _seed_dir(cfg, seed)
        model_path = out / f"model_{cfg.train_loss}.lirn"
        if not model_path.exists():
            raise StageError(
                "eval", f"missing checkpoint {model_path}; run the train stage first"
            )
        net = load_net(model_path)
        if net.layer_dims[0] != task.input_dim:
            raise StageError(
                "eval",
                f"checkpoint input dim {net.layer_dims[0]} does not match task {task.input_dim}",
            )
        rows, per_split_oriented, extras = _evaluate_net(cfg, task, net, seed, out)
        write_report_csv(rows, out / "eval_report.csv")
        write_summary_json(rows, extras, out / "eval_summary.json")
        write_layer_profile_svg(per_split_oriented, True, out / "layer_auroc.svg")
        logger.info("seed %d: wrote %d report rows", seed, len(rows))
    _write_manifest(cfg)


def _evaluate_net(cfg: RunConfig, task, net, seed: int, out: Path):
    e_train = extract_energies(net, task.train_x, class_labels=task.train_y)
    e_id = extract_energies(net, task.test_x)
    id_logits = extract_logits(net, task.test_x)
    n_taps = e_id.l

    fitted = {}
    if "md" in cfg.eval_detectors:
        fitted["md"] = fit_md(e_train)
    if "knn" in cfg.eval_detectors:
        fitted["knn"] = fit_knn(e_train, cfg.eval_knn_k or None)
    if "vae" in cfg.eval_detectors:
        fitted["vae"] = fit_vae(
            e_train, VaeConfig(epochs=cfg.eval_vae_epochs, lr=cfg.eval_vae_lr, seed=seed)
        )
    if "ebo" in cfg.eval_detectors:
        fitted["ebo"] = EboLogitsDetector(n_layers=n_taps)
    for name, det in fitted.items():
        save_detector(det, out / f"{name}.lird")

    rows: list[EvalRow] = []
    per_split_oriented: dict[str, np.ndarray] = {}
    for split_name, x in task.eval_ood_splits().items():
        e_ood = extract_energies(net, x)
        n_id, n_ood = e_id.n, e_ood.n

        def add(det_name: str, layer: str, s_id: np.ndarray, s_ood: np.ndarray):
            rows.append(
                EvalRow(
                    detector=det_name,
                    layer=layer,
                    split_name=split_name,
                    auroc=auroc(s_id, s_ood),
                    fpr_at_tpr95=fpr_at_tpr(s_id, s_ood, 0.95),
                    n_id=n_id,
                    n_ood=n_ood,
                )
            )

        if "ebo" in cfg.eval_detectors:
            add("ebo", "logits", -e_id.values[:, -1], -e_ood.values[:, -1])
        if "msp" in cfg.eval_detectors:
            msp = MspDetector()
            ood_logits = extract_logits(net, x)
            add(
                "msp",
                "logits",
                np.array([msp.score(r) for r in id_logits]),
                np.array([msp.score(r) for r in ood_logits]),
            )
        if "layer" in cfg.eval_detectors:
            for tap in range(n_taps):
                layer_name = "logits" if tap == n_taps - 1 else str(tap)
                add("layer_energy", layer_name, -e_id.values[:, tap], -e_ood.values[:, tap])
        res = bhl(e_id, e_ood, include_logits=cfg.eval_include_logits)
        per_split_oriented[split_name] = np.maximum(
            res.per_layer_auroc, 1.0 - res.per_layer_auroc
        )
        if "bhl" in cfg.eval_detectors:
            sign = 1.0 if res.high_is_id else -1.0
            s_id = sign * e_id.values[:, res.best_layer]
            s_ood = sign * e_ood.values[:, res.best_layer]
            layer_name = "logits" if res.best_layer == n_taps - 1 else str(res.best_layer)
            add("bhl", layer_name, s_id, s_ood)
        for name in ("md", "knn", "vae"):
            if name in fitted:
                add(
                    name,
                    "all",
                    fitted[name].ranking_scores(e_id.values),
                    fitted[name].ranking_scores(e_ood.values),
                )

    extras = {
        "seed": seed,
        "id_accuracy": accuracy(id_logits, task.test_y),
        "n_taps": n_taps,
        "include_logits": cfg.eval_include_logits,
    }
    return rows, per_split_oriented, extras


def cmd_score(detector_path, energy_path, threshold: float, stream=None) -> None:
    stream = stream or sys.stdout
    det = load_detector(detector_path)
    matrix = read_energy_file(energy_path)
    scores = det.score_energies(matrix.values)
    stream.write("index,score,verdict\n")
    for i, s in enumerate(scores):
        verdict = classify(det, float(s), threshold)
        stream.write(f"{i},{s:.12g},{verdict}\n")


# ---------------------------------------------------------------------------
# argument parsing


def _setup_logging() -> None:
    level = os.environ.get("LIR_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lir",
        description="Out-of-distribution detection from intermediate-layer energies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="key=value run config file")
        p.add_argument("--out", default=None, help="override the configured output directory")
        p.add_argument(
            "--seed", type=int, action="append", default=None, help="seed (repeatable)"
        )

    add_common(sub.add_parser("gen", help="generate the synthetic task files"))
    add_common(sub.add_parser("train", help="train CE or energy-regularized nets"))
    p_eval = sub.add_parser("eval", help="fit detectors and write evaluation reports")
    add_common(p_eval)
    p_eval.add_argument(
        "--include-logits",
        action="store_true",
        help="let the logits column compete in best-layer selection",
    )
    p_score = sub.add_parser("score", help="stream per-sample score + verdict CSV")
    p_score.add_argument("detector", help="saved detector file (LIRD)")
    p_score.add_argument("energies", help="energy matrix file (LIRE)")
    p_score.add_argument("--threshold", type=float, required=True)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    stage = args.command
    try:
        if stage == "score":
            cmd_score(args.detector, args.energies, args.threshold)
            return 0
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.out_dir = (Path.cwd() / args.out).resolve()
        if args.seed:
            cfg.seeds = tuple(args.seed)
        if stage == "eval" and getattr(args, "include_logits", False):
            cfg.eval_include_logits = True
        if stage == "gen":
            cmd_gen(cfg)
        elif stage == "train":
            cmd_train(cfg)
        elif stage == "eval":
            cmd_eval(cfg)
        return 0
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"error [{stage}]: missing file: {exc}", file=sys.stderr)
    except Exception as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
