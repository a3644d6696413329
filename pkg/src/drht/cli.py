"""Command-line entry point: gen-data, train, infer, eval."""

import argparse
from dataclasses import fields
import json
import logging
import os
import sys

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, load_config, parse_override
from .data import load_dataset, make_dataset, stack, write_dataset
from .imageio import ImageFormatError, read_ppm, write_pfm, write_ppm
from .metrics import MetricReport
from .model import build_network, forward_drht, full_radiance
from .training import JsonlLog, TrainingDiverged, pretrain_f1, train_joint

log = logging.getLogger("drht")


class CliError(Exception):
    pass


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file")
    group = p.add_argument_group("config overrides (JSON values)")
    for f in fields(TrainConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", metavar="VALUE",
                           default=None)


def _config(args):
    overrides = {}
    for f in fields(TrainConfig):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            overrides[f.name] = parse_override(f.name, raw)
    return load_config(args.config, overrides)


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args):
    cfg = _config(args)
    if args.scenes <= 0:
        raise CliError("empty dataset requested")
    triplets = make_dataset(args.scenes, tuple(cfg.patch_size), cfg.data_seed, cfg.simulator(),
                            tuple(cfg.scene_size), cfg.transfer())
    try:
        write_dataset(args.out_dir, triplets, meta={"scenes": args.scenes, "config": cfg.to_dict()})
    except OSError as e:
        raise CliError(f"cannot write dataset to {args.out_dir}: {e}") from None
    print(f"wrote {len(triplets)} triplets to {args.out_dir}")


# ---------------------------------------------------------------- train


def _save(out, networks, cfg, optimizer, progress):
    save_checkpoint(os.path.join(out, "checkpoint"),
                    Checkpoint(networks, cfg.transfer(), optimizer, progress))


def cmd_train(args):
    cfg = _config(args)
    try:
        triplets = load_dataset(args.data)
    except (OSError, KeyError, ValueError) as e:
        raise CliError(f"invalid dataset manifest in {args.data}: {e}") from None
    inputs, hdr, ldr = (a.astype(nx.default_dtype()) for a in stack(triplets))
    os.makedirs(args.out, exist_ok=True)
    timing = not nx.deterministic_mode()
    train_log = JsonlLog(os.path.join(args.out, "train_log.jsonl"), timing=timing,
                         truncate=not args.resume)

    networks, opt, phase, step = None, None, "pretrain", 0
    if args.resume:
        try:
            ck = load_checkpoint(args.resume)
        except CheckpointError as e:
            raise CliError(f"refusing to resume: {e}") from None
        networks, opt = ck.networks, ck.optimizer
        phase, step = ck.progress.get("phase", "pretrain"), int(ck.progress.get("step", 0))
        if "f1" not in networks:
            raise CliError("refusing to resume: checkpoint has no f1 network")
    every = cfg.checkpoint_every

    def periodic(name):
        def hook(i, nets, state):
            if every and (i + 1) % every == 0:
                _save(args.out, nets, cfg, state, {"phase": name, "step": i + 1})
        return hook

    try:
        if phase == "pretrain":
            theta1 = networks["f1"] if networks else build_network(cfg.spec(), cfg.init_seed, cfg.init_sigma)
            theta1, opt, _ = pretrain_f1(inputs, hdr, cfg.settings(cfg.pretrain_steps), theta1=theta1,
                                         log=train_log, on_step=periodic("pretrain"),
                                         start_step=min(step, cfg.pretrain_steps), opt_state=opt)
            networks = {"f1": theta1}
            _save(args.out, networks, cfg, opt, {"phase": "pretrain", "step": cfg.pretrain_steps})
            if args.pretrain_only:
                return
            phase, step, opt = "joint", 0, None
        if args.pretrain_only:
            _save(args.out, networks, cfg, opt, {"phase": phase, "step": step})
            return
        theta2 = networks.get("f2")
        if theta2 is None:
            theta2 = build_network(networks["f1"].spec, cfg.init_seed + 1, cfg.init_sigma)
        theta1, theta2, opt, _ = train_joint(inputs, hdr, ldr, networks["f1"], cfg.settings(cfg.joint_steps),
                                             theta2=theta2, log=train_log, on_step=periodic("joint"),
                                             start_step=min(step, cfg.joint_steps), opt_state=opt)
        _save(args.out, {"f1": theta1, "f2": theta2}, cfg, opt,
              {"phase": "joint", "step": max(step, cfg.joint_steps)})
    except TrainingDiverged as e:
        _save(args.out, e.networks, cfg, None, {"phase": phase, "step": e.step, "diverged": True})
        raise CliError(f"{e}; last good checkpoint kept in {args.out}/checkpoint") from None


# ---------------------------------------------------------------- infer


def reflect_pad(image, multiple):
    h, w = image.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return image, (h, w)
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect"), (h, w)


def run_inference(ck, image):
    """Corrected LDR and full-range radiance for one (H, W, 3) image."""
    theta1, theta2 = ck.networks["f1"], ck.networks["f2"]
    padded, (h, w) = reflect_pad(image, theta1.spec.size_multiple)
    x = padded.transpose(2, 0, 1)[None].astype(nx.default_dtype())
    with nx.no_grad():
        s_hat, out = forward_drht(theta1, theta2, x, ck.transfer, train=False)
    ldr = out.data[0].transpose(1, 2, 0)[:h, :w]
    radiance = full_radiance(s_hat.data[0].transpose(1, 2, 0)[:h, :w], ck.transfer)
    return ldr, radiance


def cmd_infer(args):
    try:
        ck = load_checkpoint(args.ckpt)
    except CheckpointError as e:
        raise CliError(str(e)) from None
    missing = {"f1", "f2"} - set(ck.networks)
    if missing:
        raise CliError(f"checkpoint lacks network(s) {sorted(missing)}; run joint training first")
    try:
        image = read_ppm(args.inp)
    except (OSError, ImageFormatError) as e:
        raise CliError(f"cannot read {args.inp}: {e}") from None
    ldr, radiance = run_inference(ck, image)
    write_ppm(args.out, ldr)
    if args.dump_hdr:
        write_pfm(args.dump_hdr, radiance.astype(np.float32))


# ---------------------------------------------------------------- eval


def cmd_eval(args):
    try:
        with open(args.pairs) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"cannot read pairs manifest: {e}") from None
    pairs = manifest.get("pairs") if isinstance(manifest, dict) else None
    if not pairs:
        raise CliError("pairs manifest is empty")
    root = os.path.dirname(os.path.abspath(args.pairs))
    report = MetricReport()
    for entry in pairs:
        test, ref = entry.get("test"), entry.get("reference")
        try:
            a = read_ppm(os.path.join(root, test))
            b = read_ppm(os.path.join(root, ref))
            report.add(test, a, b)
        except (OSError, TypeError, ValueError) as e:
            report.add_error(test, str(e))
    result = report.to_dict()
    with open(args.report, "w") as f:
        json.dump(result, f, indent=2, sort_keys=True)
        f.write("\n")
    if not result["mean"]:
        raise CliError("every pair failed to evaluate")
    m = result["mean"]
    print(f"mean PSNR {m['psnr']:.3f} dB  SSIM {m['ssim']:.4f}  FSIM {m['fsim']:.4f}")


# ---------------------------------------------------------------- main


def build_parser():
    parser = argparse.ArgumentParser(prog="drht", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic triplet dataset")
    _add_config_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pretrain f1, then train both networks jointly")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="dataset directory with dataset.json")
    p.add_argument("--out", required=True, help="output directory for checkpoint and log")
    p.add_argument("--pretrain-only", action="store_true")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="correct one PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-hdr", help="also write the recovered radiance as PFM")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM/FSIM over a pairs manifest")
    p.add_argument("--pairs", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    nx.configure_threads()
    nx.set_precision(32)
    try:
        args.func(args)
    except (CliError, ConfigError) as e:
        print(f"drht {args.command}: error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"drht {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
