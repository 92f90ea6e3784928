"""Command-line surface: data generation, staged training, fusion, saliency
export, enhancement, and metric evaluation.

Exit codes: 0 success, 2 argument/usage error, 3 data or model error,
4 numeric error. ATNF_THREADS caps the evaluation fan-out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import imgcore, metrics, network, training
from .errors import ModelError, NumericError, StateError


def _require_file(path: str) -> str:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _pad_to_multiple8(img: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = img.shape
    ph = (-h) % 8
    pw = (-w) % 8
    if ph == 0 and pw == 0:
        return img, (h, w)
    return np.pad(img, ((0, ph), (0, pw)), mode="reflect"), (h, w)


def _load_pair(path_a: str, path_b: str) -> tuple[np.ndarray, np.ndarray]:
    a = imgcore.load_image(_require_file(path_a))
    b = imgcore.load_image(_require_file(path_b))
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    return a, b


# -- commands -----------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    pairs = training.gen_synthetic(args.seed, args.count, size=args.size)
    os.makedirs(args.out, exist_ok=True)
    manifest = {"seed": args.seed, "count": args.count, "size": args.size, "pairs": []}
    for i, pair in enumerate(pairs):
        name = f"pair_{i:03d}"
        entry = {"name": name}
        for suffix, img in (("a", pair.modality_a), ("b", pair.modality_b),
                            ("mask", pair.truth_mask)):
            fname = f"{name}_{suffix}.png"
            imgcore.save_image(os.path.join(args.out, fname), img)
            entry[suffix] = fname
        manifest["pairs"].append(entry)
    tmp = os.path.join(args.out, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, os.path.join(args.out, "manifest.json"))
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def load_dataset(data_dir: str) -> list[training.SyntheticPair]:
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(f"no such file: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    pairs = []
    for entry in manifest["pairs"]:
        a = imgcore.load_image(_require_file(os.path.join(data_dir, entry["a"])))
        b = imgcore.load_image(_require_file(os.path.join(data_dir, entry["b"])))
        mask = imgcore.load_image(_require_file(os.path.join(data_dir, entry["mask"])))
        pairs.append(training.SyntheticPair(
            modality_a=a, modality_b=b, truth_mask=(mask >= 0.5).astype(np.float64)))
    return pairs


def _resolve_data(source: str, seed: int, size: int) -> list[training.SyntheticPair]:
    if source.startswith("synthetic:"):
        count = int(source.split(":", 1)[1])
        return training.gen_synthetic(seed, count, size=size)
    if not os.path.isdir(source):
        raise FileNotFoundError(f"no such data directory: {source}")
    return load_dataset(source)


def _apply_config_file(args, parser_defaults: dict) -> None:
    """key=value lines; explicit command-line flags take precedence."""
    path = _require_file(args.config)
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line (expected key=value): {line!r}")
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            value = value.strip()
            if key not in parser_defaults:
                raise ValueError(f"unknown config key {key!r}")
            if getattr(args, key) == parser_defaults[key]:
                cast = parser_defaults[key]
                if isinstance(cast, bool):
                    setattr(args, key, value.lower() in ("1", "true", "yes"))
                elif isinstance(cast, int):
                    setattr(args, key, int(value))
                elif isinstance(cast, float):
                    setattr(args, key, float(value))
                else:
                    setattr(args, key, value)


_TRAIN_DEFAULTS = {
    "phase": None, "seed": 0, "steps": 200, "lr": 1e-3, "batch": 4,
    "data": "synthetic:64", "out": None, "curve": None, "model_in": None, "size": 64,
}


def _cmd_train(args) -> int:
    if args.config:
        _apply_config_file(args, _TRAIN_DEFAULTS)
    if not args.phase:
        raise ValueError("--phase is required (attention, enhance, or main)")
    if not args.out:
        raise ValueError("--out model path is required")
    data = _resolve_data(args.data, args.seed, args.size)
    if args.model_in:
        model = network.load_model(_require_file(args.model_in))
    else:
        model = network.init_model(args.seed)
    config = training.TrainConfig(phase=args.phase, seed=args.seed, steps=args.steps,
                                  learning_rate=args.lr, batch_size=args.batch)
    model, curve = training.train_phase(model, data, config)
    network.save_model(model, args.out)
    if args.curve:
        training.write_curve(args.curve, curve)
    last = curve[-1].l_f if curve else float("nan")
    print(f"phase {args.phase}: {len(curve)} steps, final loss {last:.6f}, model -> {args.out}")
    return 0


def _cmd_fuse(args) -> int:
    a, b = _load_pair(args.a, args.b)
    model = network.load_model(_require_file(args.model))
    pa, (h, w) = _pad_to_multiple8(a)
    pb, _ = _pad_to_multiple8(b)
    out = network.fuse(pa, pb, model)
    imgcore.save_image(args.out, out.fused[:h, :w])
    if args.saliency:
        imgcore.save_image(args.saliency, out.saliency[:h, :w])
    print(f"fused -> {args.out}")
    return 0


def _cmd_saliency(args) -> int:
    a, b = _load_pair(args.a, args.b)
    model = network.load_model(_require_file(args.model))
    pa, (h, w) = _pad_to_multiple8(a)
    pb, _ = _pad_to_multiple8(b)
    from . import attention

    fs = attention.detect_attention(pa, pb, model)
    imgcore.save_image(args.out, fs[:h, :w])
    print(f"saliency -> {args.out}")
    return 0


def _cmd_enhance(args) -> int:
    img = imgcore.load_image(_require_file(args.input))
    model = network.load_model(_require_file(args.model))
    padded, (h, w) = _pad_to_multiple8(img)
    recon, _ = network.enhance(padded, model)
    imgcore.save_image(args.out, recon[:h, :w])
    print(f"enhanced -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    known = {"model", "average", "lp"}
    unknown = set(methods) - known
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)} (choose from {sorted(known)})")
    pairs = load_dataset(args.data)
    model = None
    if "model" in methods:
        if not args.model:
            raise ValueError("--model is required when evaluating the 'model' method")
        model = network.load_model(_require_file(args.model))

    def fuse_with(method: str, pair: training.SyntheticPair) -> np.ndarray:
        if method == "model":
            return network.fuse(pair.modality_a, pair.modality_b, model).fused
        if method == "average":
            return metrics.baseline_average(pair.modality_a, pair.modality_b)
        return metrics.baseline_lp_fuse(pair.modality_a, pair.modality_b, levels=args.levels)

    jobs = [(f"pair_{i:03d}", method, pair)
            for i, pair in enumerate(pairs) for method in methods]

    def run(job):
        name, method, pair = job
        fused = fuse_with(method, pair)
        return metrics.eval_report(fused, pair.modality_a, pair.modality_b,
                                   pair=name, method=method)

    workers = max(1, int(os.environ.get("ATNF_THREADS", "1")))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run, jobs))
    else:
        reports = [run(job) for job in jobs]
    metrics.write_reports_csv(args.out, reports)
    if args.json:
        metrics.write_reports_json(args.json, reports)
    print(f"wrote {len(reports)} report rows -> {args.out}")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atnf",
        description="Attention-gated cross-modal image fusion toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic cross-modal dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train one phase (attention, enhance, main)")
    p.add_argument("--phase", choices=network.PHASES, default=_TRAIN_DEFAULTS["phase"])
    p.add_argument("--seed", type=int, default=_TRAIN_DEFAULTS["seed"])
    p.add_argument("--steps", type=int, default=_TRAIN_DEFAULTS["steps"])
    p.add_argument("--lr", type=float, default=_TRAIN_DEFAULTS["lr"])
    p.add_argument("--batch", type=int, default=_TRAIN_DEFAULTS["batch"])
    p.add_argument("--data", default=_TRAIN_DEFAULTS["data"],
                   help="dataset directory or synthetic:N")
    p.add_argument("--out", default=_TRAIN_DEFAULTS["out"], help="output model file")
    p.add_argument("--curve", default=_TRAIN_DEFAULTS["curve"], help="loss-curve CSV path")
    p.add_argument("--model-in", dest="model_in", default=_TRAIN_DEFAULTS["model_in"],
                   help="continue from this model file")
    p.add_argument("--size", type=int, default=_TRAIN_DEFAULTS["size"],
                   help="image size for synthetic data")
    p.add_argument("--config", default=None, help="key=value config file")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("fuse", help="fuse two aligned grayscale images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--saliency", default=None, help="also write the attention map here")
    p.set_defaults(fn=_cmd_fuse)

    p = sub.add_parser("saliency", help="export the cross-modal attention map")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_saliency)

    p = sub.add_parser("enhance", help="reconstruct an image through the autoencoder")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_enhance)

    p = sub.add_parser("eval", help="compute metric reports over a dataset")
    p.add_argument("--data", required=True, help="dataset directory with manifest.json")
    p.add_argument("--model", default=None)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--json", default=None, help="optional JSON output path")
    p.add_argument("--methods", default="model,average,lp")
    p.add_argument("--levels", type=int, default=4, help="pyramid levels for the lp baseline")
    p.set_defaults(fn=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:  # includes ShapeError
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ModelError, StateError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
