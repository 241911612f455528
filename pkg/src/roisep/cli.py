"""Command-line entry point: dataset simulation, training, file separation,
heatmap generation, benchmarking and self-checks.

Every run is reproducible from its flags (or --config JSON) plus --seed.
Set ROISEP_LOG=debug|info|warning for verbosity.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__, backend, cruse, evaluation, scenegen, train, wavio

log = logging.getLogger("roisep.cli")


def _load_config_file(path, args, parser):
    """Apply JSON config values for flags the user did not set explicitly."""
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SystemExit(f"error: cannot read config {path}: {exc}")
    if not isinstance(cfg, dict):
        raise SystemExit(f"error: config {path}: expected a JSON object at the top level")
    valid = {a.dest for a in parser._actions}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest not in valid:
            raise SystemExit(f"error: config {path}: unknown field '{key}'")
        if getattr(args, dest, None) is None:
            setattr(args, dest, value)
    return args


def _resolve_model(args):
    if getattr(args, "ckpt", None):
        if not os.path.isfile(args.ckpt):
            raise SystemExit(f"error: checkpoint not found: {args.ckpt}")
        return cruse.load_checkpoint(args.ckpt)
    name = args.model or "light"
    config = cruse.CruseConfig.preset(name)
    params = cruse.init_params(config, np.random.default_rng(args.seed or 0))
    return config, params


def cmd_simulate(args):
    mode, overrides = scenegen.scenario_overrides(
        args.scenario, noise=None if args.noise is None else args.noise == "on",
        sir=args.sir)
    if args.corpus and not os.path.isdir(args.corpus):
        raise SystemExit(f"error: corpus directory not found: {args.corpus}")
    manifest = scenegen.generate_dataset(
        args.out_dir, count=args.count, master_seed=args.seed, mode=mode,
        overrides=overrides, duration_s=args.duration, corpus_dir=args.corpus,
        workers=args.workers)
    print(f"wrote {args.count} clips to {args.out_dir} (manifest: {manifest})")
    return 0


def cmd_train(args):
    if not os.path.isfile(args.manifest):
        raise SystemExit(f"error: manifest not found: {args.manifest}")
    model_cfg = cruse.CruseConfig.preset(args.model or "toy")
    cfg = train.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                            seed=args.seed, lr=args.lr)
    clips = scenegen.load_training_set(args.manifest)
    val = scenegen.load_training_set(args.val_manifest) if args.val_manifest else None
    _, history = train.train_loop(clips, model_cfg, cfg, val_clips=val,
                                  checkpoint_path=args.out, log_path=args.log)
    last = history[-1]
    print(f"trained {len(history)} epochs; final loss {last['mean_loss_db']:.3f} dB"
          + (f", val delta SI-SDR {last['val_delta_sisdr_db']:.3f} dB"
             if last["val_delta_sisdr_db"] is not None else ""))
    if args.out:
        print(f"checkpoint: {args.out}")
    return 0


def cmd_separate(args):
    mix = wavio.read_wav(args.in_path)
    if mix.shape[0] != 2:
        raise SystemExit(f"error: expected a stereo input file, got {mix.shape[0]} channel(s)")
    if args.unit_mask:
        from .dsp import FREQ_BINS, num_frames
        mask = np.ones((num_frames(mix.shape[1]), FREQ_BINS), dtype=np.complex64)
        est = cruse.apply_mask(mask, mix)
    else:
        if not args.ckpt:
            raise SystemExit("error: separate needs --ckpt (or --unit-mask)")
        config, params = cruse.load_checkpoint(args.ckpt)
        est = cruse.separate(config, params, mix)
    wavio.write_wav(args.out, est)
    print(f"wrote {args.out}")
    return 0


def cmd_heatmap(args):
    if args.oracle:
        spec = ("oracle",)
    elif args.unit_mask:
        spec = ("unit",)
    elif args.ckpt:
        spec = ("ckpt", args.ckpt)
    else:
        raise SystemExit("error: heatmap needs --ckpt, --oracle or --unit-mask")
    dims = tuple(float(v) for v in args.room.split(","))
    if len(dims) != 3:
        raise SystemExit("error: --room expects 'Lx,Ly,Lz'")
    grid = evaluation.pr_heatmap(spec, room_dims=dims, t60=args.t60,
                                 seed=args.seed, workers=args.workers,
                                 log_every=args.log_every)
    evaluation.write_heatmap_csv(grid, args.out_csv)
    print(f"wrote {args.out_csv} ({grid.nx}x{grid.ny} cells)")
    if args.out_pgm:
        evaluation.write_heatmap_pgm(grid, args.out_pgm)
        print(f"wrote {args.out_pgm}")
    return 0


def cmd_bench(args):
    if args.backend:
        backend.use(args.backend)
    config, params = _resolve_model(args)
    report = evaluation.bench_rtf(config, params, n_files=args.files,
                                  dur_s=args.duration, seed=args.seed)
    print(f"model={report.model} backend={report.backend} "
          f"mean={report.mean_seconds_per_file:.3f}s RTF={report.rtf:.4f}")
    if args.out:
        evaluation.write_bench_report(report, args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args):
    from . import autodiff as ad

    rng = np.random.default_rng(args.seed)
    worst = {}
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    worst["add/mul"] = ad.gradient_check(
        lambda x, y: ad.sum_all(ad.mul(ad.add(x, y), ad.sub(x, y))), [a, b])
    worst["activations"] = ad.gradient_check(
        lambda x: ad.sum_all(ad.tanh(ad.sigmoid(x))), [a])
    x = rng.standard_normal((2, 4, 9))
    w = rng.standard_normal((3, 2, 2, 3))
    bias = rng.standard_normal(3)
    worst["conv2d"] = ad.gradient_check(
        lambda *t: ad.sum_all(ad.mul(ad.conv2d(*t), ad.conv2d(*t))), [x, w, bias])
    xt = rng.standard_normal((3, 4, 4))
    wt = rng.standard_normal((2, 3, 2, 3))
    bt = rng.standard_normal(2)
    worst["tconv2d"] = ad.gradient_check(
        lambda *t: ad.sum_all(ad.mul(ad.tconv2d(*t, 9), ad.tconv2d(*t, 9))), [xt, wt, bt])
    i_dim, h_dim = 3, 4
    gw = [rng.standard_normal((i_dim, h_dim)) for _ in range(3)]
    gu = [rng.standard_normal((h_dim, h_dim)) for _ in range(3)]
    gb = [rng.standard_normal(h_dim) for _ in range(3)]
    xs = rng.standard_normal((5, i_dim))
    worst["gru_layer"] = ad.gradient_check(
        lambda *t: ad.sum_all(ad.mul(ad.gru_layer(*t), ad.gru_layer(*t))),
        [xs, *gw, *gu, *gb])

    model_cfg = cruse.CruseConfig.preset("toy")
    params = cruse.init_params(model_cfg, rng)
    mix = rng.uniform(-0.3, 0.3, (2, 3200)).astype(np.float32)
    target = rng.uniform(-0.3, 0.3, 3200).astype(np.float32)

    names = list(params)
    coords = [(names[i % len(names)], i) for i in range(args.coords)]
    tape = ad.Tape()
    params_t = cruse.wrap_params(params, tape)
    loss = train.clip_loss_graph(model_cfg, params_t, mix, target)
    tape.backward(loss)
    eps, worst_e2e = 1e-3, 0.0
    for name, salt in coords:
        arr = params[name]
        idx = int(np.random.default_rng(salt).integers(arr.size))
        analytic = float(ad.grad_of(params_t[name]).reshape(-1)[idx])
        vals = []
        for sign in (1.0, -1.0):
            p2 = {k: v.astype(np.float64) for k, v in params.items()}
            p2[name].reshape(-1)[idx] += sign * eps
            l2 = train.clip_loss_graph(model_cfg, cruse.wrap_params(p2, None),
                                       mix.astype(np.float64), target)
            vals.append(float(l2.data))
        numeric = (vals[0] - vals[1]) / (2 * eps)
        rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        worst_e2e = max(worst_e2e, rel)
    worst["end-to-end loss"] = worst_e2e

    failed = False
    for name, err in worst.items():
        tol = 1e-3 if name == "end-to-end loss" else 1e-4
        ok = err < tol
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: max rel err {err:.3e} (tol {tol:g})")
    return 1 if failed else 0


def cmd_info(args):
    config, _ = (cruse.load_checkpoint(args.ckpt) if args.ckpt
                 else (cruse.CruseConfig.preset(args.model or "light"), None))
    n_params = cruse.count_params(config)
    frames_10s = 1001
    flops = cruse.count_flops(config, frames_10s)
    print(f"filters: {list(config.enc_filters)}")
    print(f"frequency chain: {config.freq_chain()}")
    print(f"gru groups: {config.gru_groups} x {config.group_size()} units")
    print(f"parameters: {n_params:,} ({n_params / 1e6:.2f} M)")
    print(f"flops per 10 s clip ({frames_10s} frames): {flops:,} ({flops / 1e9:.2f} G)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="roisep",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0):
        p.add_argument("--config", help="JSON file with defaults for this subcommand")
        p.add_argument("--seed", type=int, default=None,
                       help=f"master seed (default {seed_default})")
        p.set_defaults(seed_default=seed_default)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--scenario", default="train-simple",
                   choices=sorted(scenegen.SCENARIOS))
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--duration", type=float, default=None, help="clip seconds")
    p.add_argument("--noise", choices=("on", "off"), default=None)
    p.add_argument("--sir", type=float, default=None, help="fix the SIR in dB")
    p.add_argument("--corpus", default=None, help="directory of 16 kHz speech WAVs")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--val-manifest", default=None)
    p.add_argument("--model", choices=sorted(cruse.PRESETS), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--out", default=None, help="checkpoint path")
    p.add_argument("--log", default=None, help="JSONL training log path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="separate a stereo WAV file")
    common(p)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--unit-mask", action="store_true",
                   help="bypass the network with an all-ones mask")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("heatmap", help="power-reduction heatmap over a room grid")
    common(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--unit-mask", action="store_true")
    p.add_argument("--room", default=None, help="'Lx,Ly,Lz' in meters")
    p.add_argument("--t60", type=float, default=None)
    p.add_argument("--out-csv", default=None)
    p.add_argument("--out-pgm", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--log-every", type=int, default=None)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("bench", help="real-time-factor benchmark")
    common(p)
    p.add_argument("--model", choices=sorted(cruse.PRESETS), default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--files", type=int, default=None)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--backend", choices=("auto", "compiled", "python"), default=None)
    p.add_argument("--out", default=None, help="JSON report path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient self-check")
    common(p)
    p.add_argument("--coords", type=int, default=None,
                   help="sampled end-to-end coordinates (default 20)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("info", help="parameter and FLOP accounting for a model")
    common(p)
    p.add_argument("--model", choices=sorted(cruse.PRESETS), default=None)
    p.add_argument("--ckpt", default=None)
    p.set_defaults(func=cmd_info)

    return parser


_DEFAULTS = {
    "simulate": {"count": 10, "out_dir": "dataset", "duration": 10.0, "workers": 1},
    "train": {"epochs": 30, "batch_size": 4, "lr": 0.001},
    "heatmap": {"room": "12,12,2", "t60": 0.5, "out_csv": "heatmap.csv",
                "workers": 1, "log_every": 0},
    "bench": {"files": 100, "duration": 10.0},
    "gradcheck": {"coords": 20},
}


def main(argv=None):
    level = os.environ.get("ROISEP_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        _load_config_file(args.config, args, parser)
    for key, value in _DEFAULTS.get(args.command, {}).items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    if args.seed is None:
        args.seed = args.seed_default
    args.seed = int(args.seed)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, cruse.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
