"""Command-line experiment runner: gen-data, pretrain, finetune, eval, interp.

Resolution order for every setting: built-in defaults, then the config file,
then the STINT_SEED environment variable (seeds only), then --set overrides,
then dedicated flags. The fully resolved config is echoed into each output
directory so a run can be reproduced from its artifacts.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .cycle import LossWeights
from .metrics import evaluate, linear_blend_oracle, trivial_copy_baseline, write_report_csv
from .net import DESK_CONFIG, PAPER_SCALE_CONFIG, NetConfig, build_network
from .seqdata import (
    FrameSequence,
    SequenceFormatError,
    SyntheticSpec,
    generate_synthetic,
    load_sequence,
    make_quadruples,
    normalize,
    normalize_frames,
    denormalize_frames,
    save_sequence,
)
from .train import (
    Checkpoint,
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    finetune,
    finetune_defaults,
    load_checkpoint,
    pretrain,
    pretrain_defaults,
    save_checkpoint,
)

PRETRAIN_LOG_HEADER = ["epoch", "lr", "cc1", "cc2", "combined", "val_combined"]
FINETUNE_LOG_HEADER = ["epoch", "lr", "recon", "cc1", "cc2", "loss", "val_loss"]

NET_PRESETS = {"desk": DESK_CONFIG, "paper": PAPER_SCALE_CONFIG}

_SPEC_KEYS = ("kind", "n_frames", "height", "width", "channels", "vx", "vy",
              "angular_rate", "diffusion_rate", "shear_rate", "noise_std", "seed")
_WEIGHT_KEYS = ("lambda_cc1", "lambda_cc2", "gamma_cc1", "gamma_cc2")


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


@dataclass
class DataConfig:
    path: str | None = None
    spec: SyntheticSpec | None = None
    subsample_factor: int = 1


@dataclass
class EvalConfig:
    data_range: str | float = "capacity"


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=lambda: replace(DESK_CONFIG))
    pretrain: TrainConfig = field(default_factory=pretrain_defaults)
    finetune: TrainConfig = field(default_factory=finetune_defaults)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _reject_unknown(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise UsageError(f"unknown key(s) in config section '{section}': {', '.join(unknown)}")


def _build_spec(raw: dict) -> SyntheticSpec:
    _reject_unknown("data.spec", raw, _SPEC_KEYS)
    spec = SyntheticSpec()
    kwargs = {k: raw[k] for k in raw if k not in ("vx", "vy")}
    spec = replace(spec, **kwargs)
    vx = raw.get("vx", spec.velocity[0])
    vy = raw.get("vy", spec.velocity[1])
    return replace(spec, velocity=(float(vx), float(vy)))


def _build_train(section: str, base: TrainConfig, raw: dict) -> TrainConfig:
    plain = [f.name for f in fields(TrainConfig) if f.name != "loss_weights"]
    _reject_unknown(section, raw, plain + list(_WEIGHT_KEYS))
    weights = replace(base.loss_weights,
                      **{k: float(raw[k]) for k in _WEIGHT_KEYS if k in raw})
    cfg = replace(base, **{k: raw[k] for k in raw if k in plain})
    return replace(cfg, loss_weights=weights)


def _build_net(raw: dict) -> NetConfig:
    plain = [f.name for f in fields(NetConfig)]
    _reject_unknown("net", raw, plain + ["preset"])
    preset = raw.get("preset", "desk")
    if preset not in NET_PRESETS:
        raise UsageError(f"net.preset must be one of {sorted(NET_PRESETS)}, got {preset!r}")
    base = replace(NET_PRESETS[preset])
    return replace(base, **{k: raw[k] for k in raw if k != "preset"})


def load_experiment_config(path: str | Path | None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
        if not isinstance(raw, dict):
            raise UsageError(f"config file {path} must hold a mapping")
    _reject_unknown("<root>", raw, ("data", "net", "pretrain", "finetune", "eval"))
    for section in raw:
        if not isinstance(raw[section], dict):
            raise UsageError(f"config section '{section}' must be a mapping")

    data_raw = dict(raw.get("data", {}))
    _reject_unknown("data", data_raw, ("path", "spec", "subsample_factor"))
    spec_raw = data_raw.pop("spec", None)
    data = DataConfig(**data_raw)
    if spec_raw is not None:
        data.spec = _build_spec(spec_raw)

    cfg = ExperimentConfig(
        data=data,
        net=_build_net(raw.get("net", {})),
        pretrain=_build_train("pretrain", pretrain_defaults(), raw.get("pretrain", {})),
        finetune=_build_train("finetune", finetune_defaults(), raw.get("finetune", {})),
    )
    eval_raw = raw.get("eval", {})
    _reject_unknown("eval", eval_raw, ("data_range",))
    cfg.eval = EvalConfig(**eval_raw)

    seed_env = os.environ.get("STINT_SEED")
    if seed_env is not None:
        try:
            seed = int(seed_env)
        except ValueError:
            raise UsageError(f"STINT_SEED must be an integer, got {seed_env!r}") from None
        cfg.pretrain = replace(cfg.pretrain, seed=seed)
        cfg.finetune = replace(cfg.finetune, seed=seed)
    return cfg


def _apply_set_overrides(cfg: ExperimentConfig, pairs: list[str]) -> ExperimentConfig:
    for pair in pairs:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {pair!r}")
        dotted, value = pair.split("=", 1)
        section, key = dotted.split(".", 1)
        parsed = yaml.safe_load(value)
        if section == "net":
            cfg.net = _build_net_override(cfg.net, key, parsed)
        elif section in ("pretrain", "finetune"):
            current = getattr(cfg, section)
            setattr(cfg, section, _build_train(section, current, {key: parsed}))
        elif section == "data":
            if key == "subsample_factor":
                cfg.data.subsample_factor = int(parsed)
            elif key == "path":
                cfg.data.path = str(parsed)
            else:
                raise UsageError(f"--set data.{key} is not supported")
        elif section == "eval":
            _reject_unknown("eval", {key: parsed}, ("data_range",))
            cfg.eval = EvalConfig(data_range=parsed)
        else:
            raise UsageError(f"unknown --set section {section!r}")
    return cfg


def _build_net_override(base: NetConfig, key: str, value) -> NetConfig:
    if key == "preset":
        if value not in NET_PRESETS:
            raise UsageError(f"net.preset must be one of {sorted(NET_PRESETS)}")
        return replace(NET_PRESETS[value])
    plain = [f.name for f in fields(NetConfig)]
    _reject_unknown("net", {key: value}, plain)
    return replace(base, **{key: value})


def resolved_config_dict(cfg: ExperimentConfig) -> dict:
    def train_dict(tc: TrainConfig) -> dict:
        d = asdict(tc)
        d.update(d.pop("loss_weights"))
        return d

    data = {"path": cfg.data.path, "subsample_factor": cfg.data.subsample_factor}
    if cfg.data.spec is not None:
        sd = asdict(cfg.data.spec)
        vx, vy = sd.pop("velocity")
        sd.update(vx=vx, vy=vy)
        data["spec"] = sd
    return {
        "data": data,
        "net": asdict(cfg.net),
        "pretrain": train_dict(cfg.pretrain),
        "finetune": train_dict(cfg.finetune),
        "eval": asdict(cfg.eval),
    }


def _prepare_out_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists():
        if not force:
            raise UsageError(f"output directory {out} already exists; pass --force to reuse it")
    else:
        out.mkdir(parents=True)
    return out


def _echo_config(cfg: ExperimentConfig, out: Path):
    with open(out / "config.yaml", "w") as f:
        yaml.safe_dump(resolved_config_dict(cfg), f, sort_keys=False)


def _load_data(cfg: ExperimentConfig, override_path: str | None) -> FrameSequence:
    if override_path is not None:
        return load_sequence(override_path)
    if cfg.data.path is not None:
        return load_sequence(cfg.data.path)
    if cfg.data.spec is not None:
        return generate_synthetic(cfg.data.spec)
    raise UsageError("no data source: provide --data, or data.path / data.spec in the config")


def _csv_logger(path: Path, header: list[str]):
    f = open(path, "w", newline="")
    writer = csv.writer(f)
    writer.writerow(header)

    def log(row: dict):
        writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in header[1:]])
        f.flush()

    return log, f


def _model_predict_fn(net, seq: FrameSequence):
    """Adapter scoring a network on raw frames: z-score in, denormalized out."""
    stats = normalize(seq).norm_stats
    net.eval()

    def predict(in_a, in_b):
        a = torch.from_numpy(normalize_frames(in_a, stats).astype(np.float32))
        b = torch.from_numpy(normalize_frames(in_b, stats).astype(np.float32))
        with torch.no_grad():
            p1, p2 = net.predict_pair(a.unsqueeze(0), b.unsqueeze(0))
        return (denormalize_frames(p1.squeeze(0).numpy(), stats),
                denormalize_frames(p2.squeeze(0).numpy(), stats))

    return predict


def interp_sequence(net, seq: FrameSequence) -> FrameSequence:
    """Triple the temporal resolution: 3N-2 frames, originals kept bit-exactly."""
    if seq.n_frames < 2:
        raise ValueError(f"need at least 2 frames to interpolate, got {seq.n_frames}")
    normed = normalize(seq)
    stats = normed.norm_stats
    net.eval()
    out = []
    for i in range(seq.n_frames - 1):
        out.append(seq.frames[i])
        a = torch.from_numpy(normed.frames[i]).unsqueeze(0)
        b = torch.from_numpy(normed.frames[i + 1]).unsqueeze(0)
        with torch.no_grad():
            p1, p2 = net.predict_pair(a, b)
        out.append(denormalize_frames(p1.squeeze(0).numpy(), stats).astype(np.float32))
        out.append(denormalize_frames(p2.squeeze(0).numpy(), stats).astype(np.float32))
    out.append(seq.frames[-1])
    frames = np.stack(out)
    capacity = max(seq.capacity, float(frames.max()))
    return FrameSequence(frames, capacity=capacity, dt_label=f"{seq.dt_label} x3")


def _write_pgm(path: Path, img: np.ndarray):
    lo, hi = float(img.min()), float(img.max())
    scaled = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    data = np.round(scaled * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def _save_frame_grids(predict_fn, seq: FrameSequence, out_dir: Path):
    """One grid per quadruple: rows (slot 1, slot 2), columns input|prediction|truth."""
    out_dir.mkdir(exist_ok=True)
    for q in make_quadruples(seq):
        p1, p2 = predict_fn(q.in_a, q.in_b)
        tiles = [[q.in_a[0], np.asarray(p1)[0], q.gt_1[0]],
                 [q.in_b[0], np.asarray(p2)[0], q.gt_2[0]]]
        grid = np.block(tiles)
        _write_pgm(out_dir / f"sample_{q.index:04d}.pgm", grid)


def _load_net_from_checkpoint(path: str):
    ckpt = load_checkpoint(path)
    net = build_network(ckpt.net_config, seed=0)
    net.load_state_dict(ckpt.parameters)
    net.eval()
    return net, ckpt


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    height = args.height if args.height is not None else args.size
    width = args.width if args.width is not None else args.size
    spec = SyntheticSpec(
        kind=args.kind,
        n_frames=args.frames,
        height=height,
        width=width,
        channels=args.channels,
        velocity=(args.vx, args.vy),
        angular_rate=args.angular_rate,
        diffusion_rate=args.diffusion_rate,
        shear_rate=args.shear_rate,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    seq = generate_synthetic(spec)
    save_sequence(seq, args.out)
    print(f"wrote {seq.n_frames} frames ({seq.frames.shape[1]}x{seq.frames.shape[2]}"
          f"x{seq.frames.shape[3]}) to {args.out}")
    return 0


def _apply_train_flags(cfg: TrainConfig, args, weight_flags) -> TrainConfig:
    updates = {}
    for name in ("epochs", "batch_size", "lr0", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    weights = cfg.loss_weights
    for flag, attr in weight_flags.items():
        value = getattr(args, flag, None)
        if value is not None:
            weights = replace(weights, **{attr: value})
    return replace(cfg, loss_weights=weights, **updates)


def cmd_pretrain(args) -> int:
    cfg = load_experiment_config(args.config)
    cfg = _apply_set_overrides(cfg, args.set or [])
    cfg.pretrain = _apply_train_flags(cfg.pretrain, args,
                                      {"lambda_cc1": "lambda_cc1", "lambda_cc2": "lambda_cc2"})
    if args.subsample_factor is not None:
        cfg.data.subsample_factor = args.subsample_factor
    cfg.pretrain = replace(cfg.pretrain, subsample_factor=cfg.data.subsample_factor)

    seq = _load_data(cfg, args.data)
    out = _prepare_out_dir(args.out, args.force)
    _echo_config(cfg, out)
    net = build_network(cfg.net, seed=cfg.pretrain.seed)
    log, handle = _csv_logger(out / "train_log.csv", PRETRAIN_LOG_HEADER)
    try:
        ckpt = pretrain(net, [seq], cfg.pretrain, on_epoch=log)
    finally:
        handle.close()
    save_checkpoint(ckpt, out / "checkpoint.pt")
    print(f"pretrained {cfg.pretrain.epochs} epochs; checkpoint at {out / 'checkpoint.pt'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_experiment_config(args.config)
    cfg = _apply_set_overrides(cfg, args.set or [])
    cfg.finetune = _apply_train_flags(cfg.finetune, args,
                                      {"gamma_cc1": "gamma_cc1", "gamma_cc2": "gamma_cc2"})
    if args.subsample_factor is not None:
        cfg.data.subsample_factor = args.subsample_factor
    cfg.finetune = replace(cfg.finetune, subsample_factor=cfg.data.subsample_factor)

    seq = _load_data(cfg, args.data)
    out = _prepare_out_dir(args.out, args.force)
    _echo_config(cfg, out)
    net = build_network(cfg.net, seed=cfg.finetune.seed)
    start: Checkpoint | None = None
    if args.from_checkpoint is not None:
        start = load_checkpoint(args.from_checkpoint)
    else:
        print("warning: no --from checkpoint given; fine-tuning from random "
              "initialization (supervised-only mode)", file=sys.stderr)
    log, handle = _csv_logger(out / "train_log.csv", FINETUNE_LOG_HEADER)
    try:
        ckpt = finetune(net, start, [seq], cfg.finetune, on_epoch=log)
    finally:
        handle.close()
    save_checkpoint(ckpt, out / "checkpoint.pt")
    print(f"finetuned {cfg.finetune.epochs} epochs; checkpoint at {out / 'checkpoint.pt'}")
    return 0


def cmd_eval(args) -> int:
    if (args.model is None) == (args.baseline is None):
        raise UsageError("specify exactly one of --model or --baseline")
    cfg = load_experiment_config(args.config)
    cfg = _apply_set_overrides(cfg, args.set or [])
    seq = _load_data(cfg, args.data)

    if args.data_range is not None:
        cfg.eval = EvalConfig(data_range=args.data_range)
    if cfg.eval.data_range == "capacity":
        data_range = seq.capacity
    else:
        data_range = float(cfg.eval.data_range)

    if args.model is not None:
        net, _ = _load_net_from_checkpoint(args.model)
        if net.config.in_channels != seq.channels:
            raise CheckpointError(
                f"checkpoint expects {net.config.in_channels} channels, data has "
                f"{seq.channels}"
            )
        predict_fn = _model_predict_fn(net, seq)
        model_id = f"model:{args.model}"
    elif args.baseline == "copy":
        predict_fn = lambda a, b: (a, a)  # noqa: E731
        model_id = "baseline:copy"
    else:
        def predict_fn(a, b):
            pair = linear_blend_oracle(a, b)
            return pair.f1, pair.f2
        model_id = "baseline:blend"

    out = _prepare_out_dir(args.out, args.force)
    _echo_config(cfg, out)
    report = evaluate(predict_fn, seq, data_range=data_range, capacity=seq.capacity,
                      model_id=model_id, dataset_id=str(args.data or cfg.data.path or "spec"))
    write_report_csv(report, out / "report.csv")
    if args.save_frames:
        _save_frame_grids(predict_fn, seq, out / "frames")
    print(f"{model_id}: mean psnr={report.mean_psnr:.4f} dB, ssim={report.mean_ssim:.4f}, "
          f"si={report.mean_si:.6g} over {report.n_samples} quadruples")
    return 0


def cmd_interp(args) -> int:
    net, _ = _load_net_from_checkpoint(args.model)
    seq = load_sequence(args.data)
    result = interp_sequence(net, seq)
    save_sequence(result, args.out)
    print(f"interpolated {seq.n_frames} -> {result.n_frames} frames; wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stint",
                                     description="self-supervised temporal interpolation")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic FSEQ sequence")
    g.add_argument("--kind", default="translate_gaussian",
                   choices=("translate_gaussian", "rotate_field", "diffuse_blob",
                            "shear_deform"))
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--size", type=int, default=32, help="square height/width")
    g.add_argument("--height", type=int, default=None)
    g.add_argument("--width", type=int, default=None)
    g.add_argument("--channels", type=int, default=1)
    g.add_argument("--vx", type=float, default=1.0)
    g.add_argument("--vy", type=float, default=0.5)
    g.add_argument("--angular-rate", type=float, default=0.15)
    g.add_argument("--diffusion-rate", type=float, default=0.5)
    g.add_argument("--shear-rate", type=float, default=0.02)
    g.add_argument("--noise-std", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    def add_common(p):
        p.add_argument("--config", default=None, help="YAML experiment config")
        p.add_argument("--data", default=None, help="FSEQ file overriding data.path")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override any config entry")

    p = sub.add_parser("pretrain", help="unsupervised cycle-consistency training")
    add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--subsample-factor", dest="subsample_factor", type=int, default=None)
    p.add_argument("--lambda-cc1", dest="lambda_cc1", type=float, default=None)
    p.add_argument("--lambda-cc2", dest="lambda_cc2", type=float, default=None)
    p.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="supervised fine-tuning from a checkpoint")
    add_common(f)
    f.add_argument("--from", dest="from_checkpoint", default=None,
                   help="pretrained checkpoint; omit for random initialization")
    f.add_argument("--out", required=True)
    f.add_argument("--force", action="store_true")
    f.add_argument("--epochs", type=int, default=None)
    f.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    f.add_argument("--lr0", type=float, default=None)
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--subsample-factor", dest="subsample_factor", type=int, default=None)
    f.add_argument("--gamma-cc1", dest="gamma_cc1", type=float, default=None)
    f.add_argument("--gamma-cc2", dest="gamma_cc2", type=float, default=None)
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="score a model or baseline on a dataset")
    add_common(e)
    e.add_argument("--model", default=None, help="checkpoint file")
    e.add_argument("--baseline", default=None, choices=("copy", "blend"))
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")
    e.add_argument("--data-range", dest="data_range", default=None,
                   help='"capacity" or a number')
    e.add_argument("--save-frames", dest="save_frames", action="store_true")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("interp", help="triple the temporal resolution of a sequence")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_interp)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SequenceFormatError, CheckpointError, TrainingDiverged, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
