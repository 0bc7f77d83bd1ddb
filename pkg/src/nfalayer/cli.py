"""Command-line entry point: generate, train, infer, eval, ablate, calibrate, nfa-curve, check."""

from __future__ import annotations

import argparse
import configparser
import csv
import itertools
import json
import logging
import struct
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import __version__
from .backbone import NetworkSpec, load_checkpoint
from .data import SyntheticConfig, generate, generate_samples, load_dataset, quantize16, read_gray
from .errors import ConfigError, DataLoadError, NFAError
from .evaluation import (
    MetricsReport,
    calibration_report,
    curve_export,
    epsilon_meaningfulness_check,
    evaluate,
    fragmentation,
)
from .training import predict, train

log = logging.getLogger("nfalayer")

# Every configurable default lives here; the shipped configs/default.ini mirrors it.
DEFAULTS = {
    "run": {"seed": 0, "out_dir": "runs/default"},
    "data": {
        "manifest": "",
        "kind": "targets",
        "size": (64, 64),
        "count": 200,
        "seed": 0,
        "targets_per_image": (1, 3),
        "amplitude": (0.15, 0.4),
        "psf_sigma": (0.5, 1.5),
        "background_level": 0.3,
        "noise_std": 0.03,
        "noise_length": 1.0,
        "gradient_amplitude": 0.1,
        "clutter_count": (0, 3),
        "clutter_amplitude": 0.1,
        "cracks_per_image": (1, 2),
        "crack_width": (1.0, 3.0),
        "crack_contrast": (0.15, 0.35),
    },
    "network": {
        "levels": 3,
        "channels": (8, 16, 32),
        "head": "nfa",
        "sigma_form": "elliptical",
        "multiscale": True,
        "eca": True,
        "spatial": False,
        "reduce": "max",
        "alpha": 5e-4,
        "nfa_channels": 2,
        "window": 7,
        "heads": 1,
        "n_test_mode": "output",
    },
    "training": {
        "epochs": 60,
        "lr": 0.01,
        "lr_min": 0.0,
        "reg_weight": 0.05,
        "batch_size": 4,
        "validate_every": 1,
    },
    "evaluation": {
        "threshold": -1.0,  # negative: use the head's default (0.1 NFA, 0.5 plain)
        "split": "test",
        "iou_min": 0.05,
        "tolerance_px": 2,
        "bins": 10,
        "fragmentation_fractions": (0.5, 0.7, 0.9),
    },
    "calibrate": {"alpha_recalib": 0.003},
    "check": {"k": 4, "size": (100, 100), "epsilons": (1.0, 10.0), "trials": 200, "gradient_seed": 0},
    "curve": {"k": 1, "n_test": 1, "x_max": 10.0, "points": 201},
    "ablate": {
        "sigma_forms": ("spherical", "elliptical", "dense"),
        "multiscale": (True, False),
        "eca": (True, False),
        "reg": (True, False),
        "alphas": (1e-4, 5e-4, 1e-3),
    },
}

_TRUE = {"on", "true", "yes", "1"}
_FALSE = {"off", "false", "no", "0"}


def _parse_scalar(text: str, like, key: str):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected on/off, got {text!r}")
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def parse_value(text: str, default, key: str):
    if isinstance(default, tuple):
        items = [t for t in text.split(",") if t.strip()]
        return tuple(_parse_scalar(t, default[0], key) for t in items)
    return _parse_scalar(text, default, key)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


def load_config(path: Optional[str]) -> dict:
    """Defaults overlaid with an INI file (or a run descriptor JSON); unknown keys are errors."""
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    if not path:
        return cfg
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    if p.suffix == ".json":
        try:
            raw = json.loads(p.read_text())["config"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"{p} is not a run descriptor: {exc}") from None
        sections = {sec: {k: format_value(tuple(v) if isinstance(v, list) else v) for k, v in vals.items()}
                    for sec, vals in raw.items()}
    else:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(p.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}".replace("\n", " ")) from None
        sections = {sec: dict(parser[sec]) for sec in parser.sections()}
    unknown = []
    for sec, vals in sections.items():
        if sec not in DEFAULTS:
            unknown.append(f"[{sec}]")
            continue
        for key in vals:
            if key not in DEFAULTS[sec]:
                unknown.append(f"{sec}.{key}")
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for sec, vals in sections.items():
        for key, text in vals.items():
            cfg[sec][key] = parse_value(text, DEFAULTS[sec][key], f"{sec}.{key}")
    return cfg


def _onoff(text: str) -> bool:
    return parse_value(text, True, "flag")


def apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    mapping = {
        "seed": ("run", "seed"),
        "out_dir": ("run", "out_dir"),
        "threshold": ("evaluation", "threshold"),
        "alpha": ("network", "alpha"),
        "sigma_form": ("network", "sigma_form"),
        "reduce": ("network", "reduce"),
        "eca": ("network", "eca"),
        "spatial": ("network", "spatial"),
        "multiscale": ("network", "multiscale"),
        "head": ("network", "head"),
        "reg_weight": ("training", "reg_weight"),
        "epochs": ("training", "epochs"),
        "lr": ("training", "lr"),
        "data": ("data", "manifest"),
        "alpha_recalib": ("calibrate", "alpha_recalib"),
        "trials": ("check", "trials"),
    }
    for attr, (sec, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[sec][key] = value
    return cfg


def network_spec(cfg: dict) -> NetworkSpec:
    n = cfg["network"]
    return NetworkSpec(
        levels=n["levels"], channels=n["channels"], head=n["head"], sigma_form=n["sigma_form"],
        multiscale=n["multiscale"], use_eca=n["eca"], use_spatial_block=n["spatial"], reduce=n["reduce"],
        alpha=n["alpha"], reg_weight=cfg["training"]["reg_weight"], nfa_channels=n["nfa_channels"],
        window=n["window"], heads=n["heads"], n_test_mode=n["n_test_mode"],
    )


def synthetic_config(cfg: dict) -> SyntheticConfig:
    d = dict(cfg["data"])
    d.pop("manifest")
    return SyntheticConfig(divisor=2 ** (cfg["network"]["levels"] - 1), **d)


def load_data(cfg: dict):
    if cfg["data"]["manifest"]:
        return load_dataset(cfg["data"]["manifest"])
    return generate_samples(synthetic_config(cfg))


def threshold_for(cfg: dict, spec: NetworkSpec) -> float:
    t = cfg["evaluation"]["threshold"]
    return spec.threshold if t is None or t < 0 else t


def write_descriptor(out_dir: Path, command: str, cfg: dict, argv: list) -> None:
    desc = {
        "command": command,
        "config": {sec: {k: list(v) if isinstance(v, tuple) else v for k, v in vals.items()} for sec, vals in cfg.items()},
        "seed": cfg["run"]["seed"],
        "code_version": __version__,
        "argv": argv,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps(desc, indent=2, sort_keys=True))


def _samples(dataset, split: str):
    return dataset.samples if split == "all" else dataset.split(split)


def evaluate_scores(scores: list, masks: list, cfg: dict, threshold: float) -> MetricsReport:
    ev = cfg["evaluation"]
    report = evaluate(scores, masks, threshold, tol_px=ev["tolerance_px"], bins=ev["bins"], iou_min=ev["iou_min"])
    report.object["fragmentation"] = fragmentation(scores, masks, ev["fragmentation_fractions"])
    return report


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: dict, args) -> int:
    path = generate(synthetic_config(cfg), Path(cfg["run"]["out_dir"]))
    print(path)
    return 0


def run_train(cfg: dict, out_dir: Optional[Path], dataset=None):
    spec = network_spec(cfg)
    tr = cfg["training"]
    dataset = load_data(cfg) if dataset is None else dataset
    return train(spec, dataset, tr["epochs"], lr=tr["lr"], reg_weight=tr["reg_weight"], seed=cfg["run"]["seed"],
                 batch_size=tr["batch_size"], lr_min=tr["lr_min"], out_dir=out_dir,
                 validate_every=tr["validate_every"])


def cmd_train(cfg: dict, args) -> int:
    result = run_train(cfg, Path(cfg["run"]["out_dir"]))
    last = result.log[-1] if result.log else None
    print(json.dumps({"best_epoch": result.best_epoch, "final_loss": None if last is None else last[1]}))
    return 0


def write_significance(path: Path, values: np.ndarray, n_test: int) -> None:
    """Raw dump: b'NSIG', u32 height, u32 width, u32 n_test, then little-endian f32 values."""
    h, w = values.shape
    path.write_bytes(b"NSIG" + struct.pack("<III", h, w, n_test) + values.astype("<f4").tobytes())


def read_significance(path) -> tuple[np.ndarray, int]:
    blob = Path(path).read_bytes()
    if blob[:4] != b"NSIG" or len(blob) < 16:
        raise DataLoadError(f"{path}: not a significance dump")
    h, w, n_test = struct.unpack_from("<III", blob, 4)
    data = np.frombuffer(blob[16:], dtype="<f4")
    if data.size != h * w:
        raise DataLoadError(f"{path}: expected {h * w} values, found {data.size}")
    return data.reshape(h, w).astype(np.float64), n_test


def cmd_infer(cfg: dict, args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    samples = _samples(load_data(cfg), args.split)
    out = Path(cfg["run"]["out_dir"])
    (out / "scores").mkdir(parents=True, exist_ok=True)
    if args.significance:
        (out / "significance").mkdir(parents=True, exist_ok=True)
    preds = predict(model, [s.image for s in samples])
    for s, p in zip(samples, preds):
        Image.fromarray(quantize16(p.scores)).save(out / "scores" / f"{s.name}.png")
        if args.significance and p.significance is not None:
            write_significance(out / "significance" / f"{s.name}.sig", p.significance, p.n_test)
    print(out / "scores")
    return 0


def cmd_eval(cfg: dict, args) -> int:
    samples = _samples(load_data(cfg), cfg["evaluation"]["split"] if args.split is None else args.split)
    masks = [s.mask for s in samples]
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        spec = ckpt.spec
        scores = [p.scores for p in predict(ckpt.build_model(), [s.image for s in samples])]
    elif args.predictions:
        spec = network_spec(cfg)
        scores = []
        pred_dir = Path(args.predictions)
        if (pred_dir / "scores").is_dir():  # the directory written by `infer`
            pred_dir = pred_dir / "scores"
        for s in samples:
            path = pred_dir / f"{s.name}.png"
            if not path.exists():
                raise DataLoadError(f"missing prediction {path}")
            raw, full = read_gray(path)
            scores.append(raw.astype(np.float64) / full)
    else:
        raise ConfigError("eval needs --checkpoint or --predictions")
    report = evaluate_scores(scores, masks, cfg, threshold_for(cfg, spec))
    out = Path(cfg["run"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "metrics.json")
    print(json.dumps(report.object))
    return 0


ABLATION_FIELDS = ("sigma_form", "multiscale", "eca", "reg", "alpha", "precision", "recall", "f1", "ap",
                   "fa_per_image", "fragmentation", "best_epoch", "seconds")


def ablation_matrix(cfg: dict) -> list:
    a = cfg["ablate"]
    return list(itertools.product(a["sigma_forms"], a["multiscale"], a["eca"], a["reg"], a["alphas"]))


def run_ablation(cfg: dict, out_dir: Path, dataset=None) -> list:
    dataset = load_data(cfg) if dataset is None else dataset
    split = cfg["evaluation"]["split"]
    samples = _samples(dataset, split)
    rows = []
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        writer.writeheader()
        for form, ms, eca, reg, alpha in ablation_matrix(cfg):
            run_cfg = {sec: dict(vals) for sec, vals in cfg.items()}
            run_cfg["network"].update(head="nfa", sigma_form=form, multiscale=ms, eca=eca, alpha=alpha)
            if not reg:
                run_cfg["training"]["reg_weight"] = 0.0
            t0 = time.perf_counter()
            result = run_train(run_cfg, None, dataset)
            model = result.checkpoint.build_model()
            scores = [p.scores for p in predict(model, [s.image for s in samples])]
            report = evaluate_scores(scores, [s.mask for s in samples], run_cfg,
                                     threshold_for(run_cfg, result.checkpoint.spec))
            row = {"sigma_form": form, "multiscale": format_value(ms), "eca": format_value(eca),
                   "reg": format_value(reg), "alpha": alpha, "best_epoch": result.best_epoch,
                   "seconds": round(time.perf_counter() - t0, 2)}
            row.update({k: report.object[k] for k in ("precision", "recall", "f1", "ap", "fa_per_image", "fragmentation")})
            writer.writerow(row)
            fh.flush()
            rows.append(row)
            log.info("ablation %s", row)
    return rows


def cmd_ablate(cfg: dict, args) -> int:
    rows = run_ablation(cfg, Path(cfg["run"]["out_dir"]))
    print(f"{len(rows)} runs -> {Path(cfg['run']['out_dir']) / 'ablation.csv'}")
    return 0


def cmd_calibrate(cfg: dict, args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.spec.head != "nfa":
        raise ConfigError("calibrate needs an NFA-head checkpoint (stored significance values)")
    samples = _samples(load_data(cfg), cfg["evaluation"]["split"])
    preds = predict(ckpt.build_model(), [s.image for s in samples])
    threshold = threshold_for(cfg, ckpt.spec)
    report = calibration_report(
        [p.scores for p in preds], [s.mask for s in samples], threshold, bins=cfg["evaluation"]["bins"],
        significance_values=[p.significance for p in preds], alpha=ckpt.spec.alpha,
        n_test=preds[0].n_test if preds else 1, alpha_recalib=cfg["calibrate"]["alpha_recalib"],
    )
    out = Path(cfg["run"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "calibration.json").write_text(json.dumps(report, indent=2))
    print(out / "calibration.json")
    return 0


def cmd_nfa_curve(cfg: dict, args) -> int:
    c = cfg["curve"]
    out = Path(cfg["run"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    xs = np.linspace(-c["x_max"], c["x_max"], c["points"])
    curve_export(xs, c["k"], c["n_test"], out / "nfa_curve.csv")
    print(out / "nfa_curve.csv")
    return 0


def cmd_check(cfg: dict, args) -> int:
    from .checks import gradient_suite

    c = cfg["check"]
    ok = True
    for row in epsilon_meaningfulness_check(c["k"], c["size"], c["epsilons"], c["trials"], cfg["run"]["seed"]):
        ok &= row.holds
        print(f"epsilon={row.epsilon:g} mean={row.mean:.3f} se={row.se:.3f} {'PASS' if row.holds else 'FAIL'}")
    for r in gradient_suite(c["gradient_seed"]):
        ok &= r.passed
        print(f"grad {r.name} rel_err={r.error:.2e} tol={r.tol:g} {'PASS' if r.passed else 'FAIL'}")
    print("check: all suites passed" if ok else "check: FAILURES")
    return 0 if ok else 1


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "calibrate": cmd_calibrate,
    "nfa-curve": cmd_nfa_curve,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nfalayer", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file, or a run.json descriptor to replay")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--threshold", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--sigma-form", dest="sigma_form", choices=["spherical", "elliptical", "dense"])
    common.add_argument("--reduce", choices=["min", "max"])
    common.add_argument("--eca", type=_onoff, metavar="{on,off}")
    common.add_argument("--spatial", type=_onoff, metavar="{on,off}")
    common.add_argument("--multiscale", type=_onoff, metavar="{on,off}")
    common.add_argument("--head", choices=["nfa", "plain"])
    common.add_argument("--reg-weight", dest="reg_weight", type=float)
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--data", help="dataset manifest.json (default: synthetic data from the config)")
    common.add_argument("-v", "--verbose", action="store_true")
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("infer", "eval", "calibrate"):
            p.add_argument("--checkpoint", required=name != "eval")
        if name in ("infer", "eval"):
            p.add_argument("--split", choices=["train", "val", "test", "all"], default=None if name == "eval" else "test")
        if name == "infer":
            p.add_argument("--significance", action="store_true", help="also dump fused significance maps")
        if name == "eval":
            p.add_argument("--predictions", help="directory of 16-bit score PNGs named like the dataset entries")
        if name == "calibrate":
            p.add_argument("--alpha-recalib", dest="alpha_recalib", type=float)
        if name == "check":
            p.add_argument("--trials", type=int)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.command not in ("check", "nfa-curve"):
            network_spec(cfg)  # validate before touching data
        if args.command in ("generate", "train", "ablate"):
            write_descriptor(Path(cfg["run"]["out_dir"]), args.command, cfg, argv)
        return COMMANDS[args.command](cfg, args)
    except NFAError as exc:
        print(f"error {exc.code}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error IO: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
