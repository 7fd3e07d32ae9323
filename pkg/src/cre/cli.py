"""Command-line entry point wiring the library into reproducible runs.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime error,
3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, apply_overrides, config_from_dict, config_to_dict
from .data import (load_manifest, make_manifest, sample_patch_matrix, save_manifest,
                   split_by_class)
from .errors import CreError, FormatError, ManifestError
from .evaluate import (extract_features, finetune, linear_probe, load_split_images,
                       write_metrics)
from .gradcheck import run_suite
from .model import init_parameters
from .tokenizer import fit_codebook, load_codebook, quantization_error, save_codebook
from .trainer import AdamWState, load_checkpoint, pretrain

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_GRADCHECK = 3


def _load_run_config(args) -> RunConfig:
    obj = {}
    if args.config:
        try:
            obj = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FormatError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"{args.config}: not valid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise FormatError("config: top level must be a JSON object")
    apply_overrides(obj, args.set or [])
    if args.seed is not None:
        obj["seed"] = args.seed
    if args.out is not None:
        obj["out_dir"] = args.out
    return config_from_dict(obj)


def _prepare_run(cfg: RunConfig, need_manifest: bool = True):
    """Resolve the manifest (splitting when unassigned) and echo artifacts."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")
    manifest = None
    if need_manifest:
        if cfg.manifest is None:
            raise FormatError("config: 'manifest' is required for this command")
        manifest = load_manifest(cfg.manifest)
        if any(r.split is None for r in manifest.records):
            manifest = split_by_class(manifest, ratio=cfg.split_ratio, seed=cfg.seed)
        save_manifest(manifest, out / "resolved_manifest.jsonl")
    return out, manifest


def cmd_fit_tokenizer(args) -> int:
    cfg = _load_run_config(args)
    out, manifest = _prepare_run(cfg)
    tk = cfg.tokenizer
    patches = sample_patch_matrix(manifest, (cfg.image_size, cfg.image_size),
                                  tk.patch_size, tk.patch_size, tk.max_patches, cfg.seed)
    codebook = fit_codebook(patches, tk.k, cfg.seed, tk.patch_size, tk.patch_size, 3)
    path = cfg.codebook_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    save_codebook(codebook, path)
    err = quantization_error(patches, codebook)
    print(f"codebook: K={tk.k} patch={tk.patch_size} -> {path}")
    print(f"quantization error (mean squared distance): {err:.6f}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    out, manifest = _prepare_run(cfg)
    codebook = load_codebook(cfg.codebook_path())
    model_cfg = cfg.model_config()
    if args.checkpoint:
        params, opt_state, _ = load_checkpoint(args.checkpoint, model_cfg)
    else:
        params = init_parameters(model_cfg, cfg.seed)
        opt_state = AdamWState.for_params(params)
    ckpt = out / "checkpoint.cre1"
    with open(out / "log.jsonl", "a" if args.checkpoint else "w", encoding="utf-8") as log:
        history = pretrain(manifest, codebook, params, model_cfg, cfg.train,
                           cfg.augment_config(), opt_state=opt_state, log_file=log,
                           checkpoint_path=ckpt)
    if history:
        last = history[-1]
        print(f"pre-trained {len(history)} steps; final combined loss {last.combined:.4f} "
              f"(reconstruction {last.reconstruction:.4f}, contrastive {last.contrastive:.4f})")
    else:
        print("checkpoint already at or past the configured step budget; nothing to do")
    print(f"checkpoint: {ckpt}")
    print(f"loss log:   {out / 'log.jsonl'}")
    return EXIT_OK


def _load_eval_inputs(cfg: RunConfig, checkpoint: str | None):
    if not checkpoint:
        raise FormatError("--checkpoint is required for this command")
    codebook = load_codebook(cfg.codebook_path())
    model_cfg = cfg.model_config()
    params, _, _ = load_checkpoint(checkpoint, model_cfg)
    return codebook, model_cfg, params


def cmd_probe(args) -> int:
    cfg = _load_run_config(args)
    out, manifest = _prepare_run(cfg)
    codebook, model_cfg, params = _load_eval_inputs(cfg, args.checkpoint)
    images, labels, is_pretrain = load_split_images(
        manifest, (cfg.image_size, cfg.image_size))
    features = extract_features(images, params, codebook, model_cfg)
    metrics, _ = linear_probe(features, labels, is_pretrain,
                              len(manifest.class_names), cfg.probe,
                              manifest.class_names)
    write_metrics(metrics, out / "probe_metrics.json", out / "probe_metrics.txt")
    print(metrics.to_table())
    print(f"metrics: {out / 'probe_metrics.json'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load_run_config(args)
    out, manifest = _prepare_run(cfg)
    codebook, model_cfg, params = _load_eval_inputs(cfg, args.checkpoint)
    metrics, _ = finetune(manifest, params, codebook, model_cfg, cfg.finetune,
                          (cfg.image_size, cfg.image_size), cfg.augment_config())
    write_metrics(metrics, out / "finetune_metrics.json", out / "finetune_metrics.txt")
    print(metrics.to_table())
    print(f"metrics: {out / 'finetune_metrics.json'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_run_config(args)
    results = run_suite(seed=cfg.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max rel err {r.max_rel_error:.3e}  "
              f"(< {r.threshold:.0e})  {status}")
    if all(r.passed for r in results):
        print(f"gradient check: {len(results)} checks passed")
        return EXIT_OK
    print("gradient check FAILED")
    return EXIT_GRADCHECK


def cmd_make_manifest(args) -> int:
    manifest = make_manifest(args.root)
    if args.split:
        seed = args.seed if args.seed is not None else 0
        manifest = split_by_class(manifest, ratio=args.split, seed=seed)
    out = args.out or "manifest.jsonl"
    save_manifest(manifest, out)
    print(f"{len(manifest.records)} records, {len(manifest.class_names)} classes -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cre",
        description="Self-supervised pre-training on quantized image tokens "
                    "(masked reconstruction + contrastive branch).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (dotted path), repeatable")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint file to load")

    p = sub.add_parser("fit-tokenizer", help="fit the k-means patch codebook")
    common(p)
    p.set_defaults(fn=cmd_fit_tokenizer)

    p = sub.add_parser("pretrain", help="run self-supervised pre-training")
    common(p, checkpoint=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on frozen features")
    common(p, checkpoint=True)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("finetune", help="fine-tune all parameters for classification")
    common(p, checkpoint=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("make-manifest", help="emit a manifest from root/class/images")
    p.add_argument("root", help="directory tree with one subdirectory per class")
    p.add_argument("--out", help="output manifest path (default manifest.jsonl)")
    p.add_argument("--seed", type=int, help="seed for --split")
    p.add_argument("--split", type=float, nargs="?", const=0.8,
                   help="assign pretrain/test splits at this ratio (default 0.8)")
    p.set_defaults(fn=cmd_make_manifest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FormatError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
