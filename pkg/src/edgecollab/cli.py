"""Operator entry points: synthesize, train, infer, eval, bench, convert.

Configuration is a flat INI file with sections ([train], [eval], [synth],
[recurrent], [nonrecurrent]); command-line flags override file values, and
the merged configuration is echoed to the run log so any run can be
reproduced from its log alone. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation as eval_mod
from . import trainer as trainer_mod
from .data import (
    DatasetError,
    ManifestDataset,
    SynthConfig,
    load_image_array,
    load_manifest,
    save_dataset,
    synthesize,
)
from .evaluation import EvalConfig, default_thresholds, evaluate, nms_thin, write_pr_curve
from .models import NonRecurrentConfig, RecurrentConfig, net_from_params
from .models.common import image_to_tensor
from .trainer import TrainConfig, load_checkpoint, train

import torch
from PIL import Image as PILImage


class ConfigError(ValueError):
    pass


_SECTION_TYPES = {
    "train": TrainConfig,
    "eval": EvalConfig,
    "synth": SynthConfig,
    "recurrent": RecurrentConfig,
    "nonrecurrent": NonRecurrentConfig,
}


def _coerce(raw: str, target_type):
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type is tuple:
        return tuple(
            float(x) if "." in x else int(x) for x in raw.replace(",", " ").split()
        )
    return raw


def read_config_file(path) -> dict:
    """Parse an INI config into {section: {key: typed value}}; reject unknown keys."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    out: dict = {}
    for section in parser.sections():
        if section not in _SECTION_TYPES:
            raise ConfigError(
                f"unknown config section [{section}]; expected one of "
                f"{sorted(_SECTION_TYPES)}"
            )
        cls = _SECTION_TYPES[section]
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        type_map = {
            f.name: type(getattr(cls(), f.name, None)) for f in dataclasses.fields(cls)
        }
        values = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            target = type_map[key]
            if target is type(None) or not isinstance(target, type):
                target = str
            if key == "noise_kinds":
                values[key] = tuple(raw.replace(",", " ").split())
            else:
                values[key] = _coerce(raw, target)
        out[section] = values
    return out


def _build_train_config(file_cfg: dict, args) -> TrainConfig:
    values = dict(file_cfg.get("train", {}))
    if file_cfg.get("recurrent"):
        values["recurrent"] = RecurrentConfig(**file_cfg["recurrent"])
    if file_cfg.get("nonrecurrent"):
        nr = dict(file_cfg["nonrecurrent"])
        if "stage_channels" in nr:
            nr["stage_channels"] = tuple(int(c) for c in nr["stage_channels"])
        values["nonrecurrent"] = NonRecurrentConfig(**nr)
    for flag, key in (
        ("epochs", "total_epochs"),
        ("seed", "seed"),
        ("ablation", "ablation_mode"),
        ("lam", "lam"),
        ("alpha_convention", "alpha_convention"),
        ("device", "device"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            values[key] = val
    if getattr(args, "no_augment", False):
        values["augment_data"] = False
    return TrainConfig(**values)


def _build_eval_config(file_cfg: dict, args) -> EvalConfig:
    values = dict(file_cfg.get("eval", {}))
    if getattr(args, "max_dist", None) is not None:
        values["max_dist"] = args.max_dist
    if getattr(args, "thresholds", None) is not None:
        values["thresholds"] = default_thresholds(args.thresholds)
    if getattr(args, "no_test_activation", False):
        values["apply_test_activation"] = False
    if getattr(args, "no_nms", False):
        values["apply_nms"] = False
    if isinstance(values.get("thresholds"), int):
        values["thresholds"] = default_thresholds(values["thresholds"])
    return EvalConfig(**values)


def _build_synth_config(file_cfg: dict, args) -> SynthConfig:
    values = dict(file_cfg.get("synth", {}))
    for flag, key in (
        ("images", "n_images"),
        ("size", "image_size"),
        ("shapes", "shapes_per_image"),
        ("rho", "noise_rate"),
        ("seed", "seed"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            values[key] = val
    return SynthConfig(**values)


def _echo_config(label: str, cfg, out_dir=None) -> None:
    payload = dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else dict(cfg)
    text = json.dumps(payload, indent=2, default=str)
    print(f"[{label} config]\n{text}")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "run_config.json", "a") as fh:
            fh.write(json.dumps({label: payload}, default=str) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synthesize(args) -> int:
    file_cfg = read_config_file(args.config) if args.config else {}
    cfg = _build_synth_config(file_cfg, args)
    out = Path(args.out)
    _echo_config("synth", cfg, out)

    n_test = args.test_images if args.test_images is not None else max(
        1, cfg.n_images // 4
    )
    train_cfg = dataclasses.replace(cfg, seed=cfg.seed * 2)
    test_cfg = dataclasses.replace(cfg, n_images=n_test, seed=cfg.seed * 2 + 1)

    clean_tr, noisy_tr = synthesize(train_cfg)
    clean_te, noisy_te = synthesize(test_cfg)
    save_dataset(clean_tr, out / "clean", "train")
    save_dataset(noisy_tr, out / "noisy", "train")
    save_dataset(clean_te, out / "clean", "test")
    save_dataset(noisy_te, out / "noisy", "test")
    print(
        f"wrote {len(noisy_tr)} train / {len(noisy_te)} test samples "
        f"(clean + noisy variants) under {out}"
    )
    return 0


def _gt_threshold_for(kind: str) -> float:
    return 0.2  # multi-annotator binarization; identity for single annotator


def cmd_train(args) -> int:
    file_cfg = read_config_file(args.config) if args.config else {}
    cfg = _build_train_config(file_cfg, args)
    out = Path(args.out)
    _echo_config("train", cfg, out)

    manifest = load_manifest(args.data_root, args.dataset, args.split)
    dataset = ManifestDataset(manifest, _gt_threshold_for(args.dataset))
    samples = [dataset[i] for i in range(len(dataset))]
    outcome = train(samples, cfg, out_dir=out)
    print(f"checkpoint: {outcome.checkpoint_path}")
    print(f"deployable parameters: {outcome.deployable}")
    return 0


def _select_params(ckpt, network: str):
    order = {
        "nonrecurrent": ("nonrecurrent_momentum", "nonrecurrent_bp"),
        "recurrent": ("recurrent_momentum", "recurrent_bp"),
    }[network]
    for name in order:
        if name in ckpt.params:
            return name, ckpt.params[name]
    raise KeyError(f"checkpoint has no {network} parameters (has {sorted(ckpt.params)})")


def _load_any_image(path) -> np.ndarray:
    return load_image_array(path)


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    name, params = _select_params(ckpt, args.network)
    net = net_from_params(params)
    net.eval()

    inputs = []
    for item in args.inputs:
        p = Path(item)
        if p.is_dir():
            inputs += sorted(
                q for q in p.iterdir() if q.suffix.lower() in (".png", ".jpg", ".jpeg")
            )
        else:
            inputs.append(p)
    if not inputs:
        print("no input images found", file=sys.stderr)
        return 1

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"running {name} on {len(inputs)} image(s)")
    for path in inputs:
        arr = _load_any_image(path)
        with torch.no_grad():
            outputs = net(arr)
        if args.activation == "test":
            prob = eval_mod.test_activation(outputs.fused_logit.numpy())
        else:
            prob = outputs.fused.numpy().astype(np.float64)
        prob8 = np.round(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.uint8)
        PILImage.fromarray(prob8, mode="L").save(out / f"{path.stem}.png")
        if args.thin:
            thin = nms_thin(prob)
            thin8 = np.round(np.clip(thin, 0.0, 1.0) * 255.0).astype(np.uint8)
            PILImage.fromarray(thin8, mode="L").save(out / f"{path.stem}_thin.png")
    print(f"wrote probability maps to {out}")
    return 0


def cmd_eval(args) -> int:
    file_cfg = read_config_file(args.config) if args.config else {}
    cfg = _build_eval_config(file_cfg, args)
    out = Path(args.out) if args.out else None
    _echo_config("eval", cfg, out)

    manifest = load_manifest(args.data_root, args.dataset, args.split)
    preds = []
    gts = []
    pred_dir = Path(args.pred_dir)
    for ident, _img, ann_paths in manifest.entries:
        pred_path = pred_dir / f"{ident}.png"
        if not pred_path.exists():
            raise DatasetError(f"missing prediction for '{ident}': {pred_path}")
        prob = np.asarray(PILImage.open(pred_path).convert("L"), dtype=np.float64)
        preds.append(prob / 255.0)
        layers = np.stack([data_mod.load_annotation(p) for p in ann_paths], axis=2)
        gts.append(layers)

    result = evaluate(preds, gts, cfg)
    print(f"images: {result.n_images}")
    print(f"ODS-F: {result.ods_f:.4f} (threshold {result.ods_threshold:.3f})")
    print(f"OIS-F: {result.ois_f:.4f}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_pr_curve(result, out / "pr_curve.txt")
        summary = {
            "n_images": result.n_images,
            "ods_f": result.ods_f,
            "ods_threshold": result.ods_threshold,
            "ois_f": result.ois_f,
        }
        (out / "eval_summary.json").write_text(json.dumps(summary, indent=2))
        print(f"wrote {out / 'pr_curve.txt'} and {out / 'eval_summary.json'}")
    return 0


def cmd_bench(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    name, params = _select_params(ckpt, args.network)
    net = net_from_params(params)
    net.eval()
    rng = np.random.default_rng(0)
    arr = rng.random((args.size, args.size, 3)).astype(np.float32)
    with torch.no_grad():
        for _ in range(3):  # warm-up
            net(arr)
        t0 = time.perf_counter()
        for _ in range(args.iterations):
            net(arr)
        elapsed = time.perf_counter() - t0
    ips = args.iterations / elapsed
    print(
        f"{name}: {ips:.2f} images/s at {args.size}x{args.size} "
        f"({elapsed / args.iterations * 1000:.1f} ms/image, local hardware)"
    )
    return 0


def cmd_convert_bsds(args) -> int:
    n = data_mod.convert_bsds(
        args.mat_root, args.image_root, args.out, n_angles=args.angles
    )
    print(f"converted {n} samples into {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgecollab",
        description="Collaborative-learning edge detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="generate a synthetic noisy-edge dataset")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--images", type=int, default=None, help="training images")
    p.add_argument("--test-images", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--shapes", type=int, default=None)
    p.add_argument("--rho", type=float, default=None, help="label-noise rate")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train", help="train the collaborative model pair")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--data-root", type=str, required=True)
    p.add_argument("--dataset", choices=data_mod.DATASET_KINDS, default="synth")
    p.add_argument("--split", choices=data_mod.SPLITS, default="train")
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--ablation", choices=trainer_mod.ABLATION_MODES, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--alpha-convention", choices=("paper", "hed"), default=None)
    p.add_argument("--device", type=str, default=None)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a trained network on images")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--network", choices=("nonrecurrent", "recurrent"),
                   default="nonrecurrent")
    p.add_argument("--activation", choices=("sigmoid", "test"), default="sigmoid")
    p.add_argument("--thin", action="store_true", help="also write thinned maps")
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--pred-dir", type=str, required=True)
    p.add_argument("--data-root", type=str, required=True)
    p.add_argument("--dataset", choices=data_mod.DATASET_KINDS, default="synth")
    p.add_argument("--split", choices=data_mod.SPLITS, default="test")
    p.add_argument("--max-dist", type=float, default=None)
    p.add_argument("--thresholds", type=int, default=None,
                   help="number of evenly spaced thresholds")
    p.add_argument("--no-test-activation", action="store_true")
    p.add_argument("--no-nms", action="store_true")
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure inference throughput locally")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--network", choices=("nonrecurrent", "recurrent"),
                   default="nonrecurrent")
    p.add_argument("--size", type=int, default=200)
    p.add_argument("--iterations", type=int, default=50)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("convert-bsds", help="convert .mat ground truth to PNG layout")
    p.add_argument("--mat-root", type=str, required=True)
    p.add_argument("--image-root", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--angles", type=int, default=0,
                   help="offline rotation count (0 disables augmentation)")
    p.set_defaults(func=cmd_convert_bsds)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except trainer_mod.TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
