from __future__ import annotations
import argparse, logging, os, sys
from pathlib import Path

from core.errors import ConfigError, GeoAdaptError
from core.evalmetrics import aggregate_seeds, reconstruction_sweep
from core.exporter import directory_digest, write_report_csv, write_report_json, write_sweep_json
from core.logs import configure_logging, get_logger
from core.settings import (
    apply_overrides,
    config_digest,
    data_root,
    eval_ratios,
    load_settings,
    model_config,
    pretrain_config,
    save_settings,
    scene_specs,
    train_config,
    worker_count,
)
from core.tensorstore import load_checkpoint, load_descriptor, save_checkpoint
from core.word_writer import ReportWriter

APP_TITLE = "geoadapt"
CONFIG_FILE = "config.json"

logger = get_logger(APP_TITLE)


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _float_list(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=APP_TITLE, description="Multi-task domain-adaptive segmentation at desk scale")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--log-file", dest="log_file", help="also write log records to this file")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory"):
        p.add_argument("--config", help="JSON or YAML run config")
        p.add_argument("--out", help=out_help)
        return p

    def data_flag(p):
        p.add_argument("--data", help="dataset root holding source/ and target/")
        return p

    def train_flags(p):
        p.add_argument("--seeds", type=_int_list, help="comma-separated seeds, e.g. 1,2,3")
        p.add_argument("--lambda-da", type=float, dest="lambda_da")
        p.add_argument("--lambda-mae", type=float, dest="lambda_mae")
        p.add_argument("--mask-ratio", type=float, dest="mask_ratio")
        p.add_argument("--steps", type=int)
        p.add_argument("--budget", type=int, dest="budget_per_class", help="labelled target pixels per class")
        p.add_argument("--core-checkpoint", dest="core_checkpoint", help="pretrained core from pretrain-core")
        return p

    common(sub.add_parser("gen-data", help="write a synthetic source/target pair"), "dataset root")
    train_flags(data_flag(common(sub.add_parser("train", help="train one run per seed"))))
    p = data_flag(common(sub.add_parser("pretrain-core", help="pretrain the frozen core on one domain")))
    p.add_argument("--domain", choices=("source", "target"), default="source")

    p = data_flag(common(sub.add_parser("eval", help="score a checkpoint on the target test split")))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, help="split seed (default: the checkpoint's seed)")

    p = train_flags(data_flag(common(sub.add_parser("reconstruct", help="masking-ratio reconstruction sweep"))))
    p.add_argument("--checkpoint", help="checkpoint to sweep; omitted = train generative-only first")
    p.add_argument("--mask-ratios", type=_float_list, dest="mask_ratios")

    train_flags(data_flag(common(sub.add_parser("ablate", help="four-configuration loss ablation"))))

    p = common(sub.add_parser("verify-math", help="numerical checks of the likelihood identities"))
    p.add_argument("--seed", type=int, default=0)
    return parser


def resolve_config(args) -> dict:
    cfg = load_settings(args.config)
    flags = {k: getattr(args, k, None) for k in (
        "lambda_da", "lambda_mae", "mask_ratio", "seeds", "steps", "budget_per_class", "mask_ratios",
        "core_checkpoint",
    )}
    if args.command == "gen-data":
        flags["data_root"] = args.out
    else:
        flags["out_dir"] = args.out
        flags["data_root"] = getattr(args, "data", None)
    return apply_overrides(cfg, **flags)


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _datasets(cfg: dict):
    root = data_root(cfg)
    return load_descriptor(root / "source"), load_descriptor(root / "target")


def _core_store(cfg: dict):
    path = cfg["model"]["core_checkpoint"]
    if not path:
        return None
    if not os.path.exists(path):
        raise ConfigError(f"core checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_gen_data(cfg: dict) -> int:
    from core.synthgeo import make_domain_pair

    source, target, shift = scene_specs(cfg)
    data = cfg["data"]
    root = data_root(cfg)
    make_domain_pair(
        root, source, target, shift,
        budget_per_class=int(cfg["train"]["budget_per_class"]),
        images_per_domain=int(data["images_per_domain"]),
        source_noise=float(data["source_noise"]),
        signature_seed=data["signature_seed"],
    )
    print(f"{root}: {directory_digest(root)}")
    return 0


def cmd_train(cfg: dict) -> int:
    from core.trainer import train_seeds

    out = _out_dir(cfg)
    save_settings(cfg, out / CONFIG_FILE)
    source, target = _datasets(cfg)
    digest = config_digest(cfg)
    records = train_seeds(source, target, train_config(cfg), model_config(cfg), out, _core_store(cfg), digest,
                          workers=worker_count(), progress=True)
    agg = aggregate_seeds([r.test for r in records])
    write_report_json(out / "report.json", {
        "config_digest": digest,
        "runs": [r.to_report(digest) for r in records],
        "aggregate": agg.to_dict(),
    })
    print(f"test mIoU {agg.miou:.4f} +/- {agg.miou_std:.4f} over seeds {agg.seeds}")
    return 0


def cmd_pretrain_core(cfg: dict, domain: str) -> int:
    from core.trainer import pretrain_core

    out = _out_dir(cfg)
    save_settings(cfg, out / CONFIG_FILE)
    source, target = _datasets(cfg)
    store = pretrain_core(source if domain == "source" else target, model_config(cfg), pretrain_config(cfg),
                          progress=True)
    path = out / "core.ckpt"
    save_checkpoint(store, store.manifest, path)
    print(f"core checkpoint written to {path}")
    return 0


def _load_model(cfg: dict, checkpoint: str, source, target, seed: int | None):
    from core.trainer import build_model, load_run_checkpoint

    if not os.path.exists(checkpoint):
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    manifest_seed = load_checkpoint(checkpoint).manifest.get("seed", 0)
    seed = manifest_seed if seed is None else seed
    model = build_model(source, target, model_config(cfg), seed)
    load_run_checkpoint(checkpoint, model)
    return model, seed


def cmd_eval(cfg: dict, checkpoint: str, seed: int | None) -> int:
    from core.trainer import evaluate_run

    out = _out_dir(cfg)
    source, target = _datasets(cfg)
    model, seed = _load_model(cfg, checkpoint, source, target, seed)
    report = evaluate_run(model, target, train_config(cfg), seed)
    write_report_json(out / "eval.json", {"checkpoint": checkpoint, "seed": seed, "test": report.to_dict()})
    print(f"MA {report.ma:.4f}  mIoU {report.miou:.4f}  mF1 {report.mf1:.4f}")
    return 0


def cmd_reconstruct(cfg: dict, checkpoint: str | None) -> int:
    """Sweep a checkpoint; without one, train on the generative task alone first."""
    from core.trainer import train_seeds

    out = _out_dir(cfg)
    source, target = _datasets(cfg)
    seed = int(cfg["eval"]["seed"])
    if checkpoint is None:
        cfg["train"].update(seg_weight=0.0, lambda_da=0.0)
        save_settings(cfg, out / CONFIG_FILE)
        tc = train_config(cfg)
        records = train_seeds(source, target, tc, model_config(cfg), out / "generative", _core_store(cfg),
                              config_digest(cfg), workers=worker_count(), progress=True)
        checkpoint = records[0].best_checkpoint
        seed = records[0].seed
    model, _ = _load_model(cfg, checkpoint, source, target, seed)
    records = reconstruction_sweep(model, source, target, eval_ratios(cfg), seed, out / "sweep")
    write_sweep_json(out / "sweep.json", records)
    writer = ReportWriter(str(out / "sweep.docx"), title="Reconstruction sweep", config_digest=config_digest(cfg))
    writer.add_sweep([{"ratio": r.ratio, "mse": r.mse, "masked_pixels": r.masked_pixels} for r in records])
    writer.add_artifact(str(checkpoint), "Checkpoint")
    for r in records:
        print(f"ratio {r.ratio:.2f}: MSE {'undefined' if r.mse is None else f'{r.mse:.6f}'}")
    return 0


def cmd_ablate(cfg: dict) -> int:
    from core.trainer import ablate

    out = _out_dir(cfg)
    save_settings(cfg, out / CONFIG_FILE)
    source, target = _datasets(cfg)
    digest = config_digest(cfg)
    columns = ablate(source, target, train_config(cfg), model_config(cfg), out, _core_store(cfg), digest,
                     workers=worker_count(), progress=True)
    table = {name: rep.to_dict() for name, rep in columns.items()}
    write_report_json(out / "report.json", {"config_digest": digest, "columns": table})
    write_report_csv(out / "report.csv", table)
    writer = ReportWriter(str(out / "report.docx"), config_digest=digest)
    writer.add_metrics_table(table)
    for name, rep in columns.items():
        print(f"{name:<20} mIoU {rep.miou:.4f} +/- {rep.miou_std:.4f}")
    return 0


def cmd_verify_math(cfg: dict, seed: int, out: str | None) -> int:
    from core.insight import format_report, run_all

    results = run_all(seed)
    text = format_report(results)
    sys.stdout.write(text)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "verify_math.txt").write_text(text, encoding="utf-8")
    return 0 if all(r.passed for r in results) else 1


def dispatch(args) -> int:
    if args.command == "verify-math":
        return cmd_verify_math(load_settings(args.config), args.seed, args.out)
    cfg = resolve_config(args)
    if args.command == "gen-data":
        return cmd_gen_data(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "pretrain-core":
        return cmd_pretrain_core(cfg, args.domain)
    if args.command == "eval":
        return cmd_eval(cfg, args.checkpoint, args.seed)
    if args.command == "reconstruct":
        return cmd_reconstruct(cfg, args.checkpoint)
    if args.command == "ablate":
        return cmd_ablate(cfg)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(logging.DEBUG if args.verbose else logging.INFO, args.log_file)
    try:
        return dispatch(args)
    except GeoAdaptError as e:
        stage = e.stage or args.command
        print(f"stage {stage} failed: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception("unexpected failure")
        print(f"stage {args.command} failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
