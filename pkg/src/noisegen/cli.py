"""``noisegen`` command line: simulate, train, distill, sample, schedule, eval, augment.

Exit codes: 0 on success, 2 for invalid input or configuration, 3 for I/O
failures.  ``NOISEGEN_THREADS`` caps the worker pool used by the per-image
commands; every image draws from its own seed, so results do not depend on
the pool size.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig, load_config
from .diffusion import make_beta_schedule
from .isp import ProfileError, get_profile, load_profile, make_noisy_pair
from .metrics import akld_from_noise, psnr, spatial_autocorr, write_report
from .model import CameraSettings, VocabularyError
from .samplers import SAMPLER_KINDS, NoiseModel, distill_one_step, dips_schedule, make_plan, sample
from .training import PairDataset, TrainState, new_state, train

log = logging.getLogger("noisegen")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 2, 3
IMAGE_SUFFIXES = (".f32", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class UsageError(ValueError):
    pass


def _threads() -> int:
    raw = os.environ.get("NOISEGEN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"NOISEGEN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("NOISEGEN_THREADS must be at least 1")
    return n


def _map(fn, items):
    items = list(items)
    n = min(_threads(), max(len(items), 1))
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def _floats(text: str, name: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--{name} expects comma-separated numbers, got {text!r}") from None
    if not vals:
        raise UsageError(f"--{name} is empty")
    return vals


def _settings_grid(args) -> list[CameraSettings]:
    sensors = [s for s in args.sensor.split(",") if s]
    if not sensors:
        raise UsageError("--sensor is empty")
    grid = []
    for iso, ss, sensor, ct in itertools.product(
        _floats(args.iso, "iso"), _floats(args.shutter, "shutter"), sensors, _floats(args.color_temp, "color-temp")
    ):
        grid.append(CameraSettings(iso, ss, sensor, ct, args.brightness))
    return grid


def _list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise UsageError(f"{directory}: no images found")
    return files


def _settings_tag(cs: CameraSettings) -> str:
    return f"{cs.sensor_type}_iso{cs.iso:g}_ss{cs.shutter_speed:g}_ct{cs.color_temp:g}_{cs.brightness_mode}"


def _write_image(out_dir: Path, rel: str, img, preview: bool) -> str:
    path = out_dir / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    io.save_tensor(path, np.asarray(img, dtype=np.float32))
    if preview:
        io.save_png(path.with_suffix(".png"), img)
    return rel


def _resolve_profile(sensor: str, profile_args) -> object:
    for spec in profile_args or ():
        p = load_profile(spec)
        if p.name == sensor:
            return p
    return get_profile(sensor)


def _split(ids_by_clean: dict, val: int) -> dict:
    stems = list(ids_by_clean)
    if val >= len(stems) and val > 0:
        raise UsageError(f"--val {val} leaves no training images out of {len(stems)}")
    val_stems = stems[len(stems) - val:] if val else []
    return {
        "train": [i for s in stems if s not in val_stems for i in ids_by_clean[s]],
        "val": [i for s in val_stems for i in ids_by_clean[s]],
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_schedule(args, cfg: RunConfig) -> int:
    T = args.t if args.t is not None else cfg.T
    S = args.s if args.s is not None else cfg.sampler_S
    r = args.r if args.r is not None else cfg.sampler_r
    plan = dips_schedule(T, S, r)
    print(" ".join(str(t) for t in plan.steps))
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    files = _list_images(args.clean_dir)
    grid = _settings_grid(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, f, cs) for i, f in enumerate(files) for cs in grid]

    def run(job):
        i, f, cs = job
        clean_src = io.load_image(f)
        rng = np.random.default_rng([args.seed, i, grid.index(cs)])
        profile = _resolve_profile(cs.sensor_type, args.profile)
        sid = f"{f.stem}_{_settings_tag(cs)}"
        noisy_rel, clean = [], None
        for k in range(args.captures):
            pair = make_noisy_pair(clean_src, cs, profile, rng)
            clean = pair.clean
            noisy_rel.append(_write_image(out, f"noisy/{sid}_{k}.f32", pair.noisy, args.preview))
        clean_rel = _write_image(out, f"clean/{sid}.f32", clean, args.preview)
        return f.stem, {"scene_id": sid, "clean_path": clean_rel, "noisy_paths": noisy_rel,
                        "settings": cs.to_dict(), "profile_name": profile.name}

    results = _map(run, jobs)
    by_clean: dict = {}
    for stem, rec in results:
        by_clean.setdefault(stem, []).append(rec["scene_id"])
    io.write_manifest(out / "manifest.json", [r for _, r in results], _split(by_clean, args.val),
                      seed=args.seed, extra={"command": "simulate"})
    print(f"{sum(len(r['noisy_paths']) for _, r in results)} noisy images -> {out / 'manifest.json'}")
    return EXIT_OK


def _dataset(manifest: io.DatasetManifest, split: str) -> PairDataset:
    clean, noisy, settings = manifest.arrays(split)
    if len(settings) == 0:
        raise UsageError(f"split {split!r} is empty")
    return PairDataset(clean, noisy, settings)


def _loss_log_path(ckpt_path) -> Path:
    return Path(str(ckpt_path) + ".losses.jsonl")


def _save_train_state(path, state: TrainState, cfg: RunConfig, psi=None) -> None:
    io.save_checkpoint(path, io.Checkpoint(cfg, state.params, state.ema, psi, state.adam, state.step, state.seed))


def cmd_train(args, cfg: RunConfig) -> int:
    manifest = io.load_dataset(args.manifest, cfg.model.sensor_vocab)
    data = _dataset(manifest, args.split)
    if args.resume:
        ck = io.load_checkpoint(args.resume, expect_model=cfg.model)
        if ck.adam is None or ck.ema is None:
            raise UsageError(f"{args.resume}: checkpoint lacks optimizer state and cannot be resumed")
        state = TrainState(ck.params, ck.ema, ck.adam, ck.step, ck.seed)
    else:
        state = new_state(cfg)
    loss_log = _loss_log_path(args.out)
    mode = "a" if args.resume else "w"
    with open(loss_log, mode) as fh:
        def checkpoint(st):
            for k, loss in enumerate(st.losses):
                fh.write(json.dumps({"step": st.step - len(st.losses) + k + 1, "loss": loss}) + "\n")
            fh.flush()
            st.losses.clear()
            _save_train_state(args.out, st, cfg)
            log.info("step %d checkpointed", st.step)

        train(state, data, cfg, args.steps, callback=checkpoint, every=args.every or args.steps)
        if state.losses or args.steps == 0:
            checkpoint(state)
    print(f"trained to step {state.step} -> {args.out}")
    return EXIT_OK


def _load_model(path, cfg: RunConfig | None, raw: bool):
    ck = io.load_checkpoint(path, expect_model=cfg.model if cfg is not None else None)
    params = ck.params if raw or ck.ema is None else ck.ema
    return ck, NoiseModel(params, ck.config.model)


def cmd_distill(args, cfg: RunConfig) -> int:
    ck, teacher = _load_model(args.ckpt, None, args.raw)
    run_cfg = ck.config
    manifest = io.load_dataset(args.manifest, run_cfg.model.sensor_vocab)
    data = _dataset(manifest, args.split)
    sched = make_beta_schedule("linear", run_cfg.T, run_cfg.beta_start, run_cfg.beta_end)
    losses: list = []
    psi = distill_one_step(
        teacher, sched, args.n or run_cfg.truncation_N,
        lambda rng, bs: data.batch(rng, bs, run_cfg.crop),
        np.random.default_rng([args.seed, 7]), args.iters, lr=run_cfg.distill_lr,
        batch_size=run_cfg.batch_size, log=losses,
    )
    ck.psi = psi
    ck.extra = dict(ck.extra, distill_seed=args.seed, distill_iters=args.iters,
                    distill_N=args.n or run_cfg.truncation_N)
    io.save_checkpoint(args.out, ck)
    final = losses[-1] if losses else float("nan")
    print(f"distilled {args.iters} iterations (final loss {final:.5f}) -> {args.out}")
    return EXIT_OK


def _sampler_plan(args, run_cfg: RunConfig):
    if args.sampler not in SAMPLER_KINDS:
        raise UsageError(f"unknown sampler kind {args.sampler!r}; choose from {SAMPLER_KINDS}")
    S = args.steps if args.steps is not None else run_cfg.sampler_S
    return make_plan(args.sampler, run_cfg.T, S, run_cfg.sampler_r if args.r is None else args.r,
                     args.n or run_cfg.truncation_N)


def _generate(ck, model, plan, clean, settings, seed):
    run_cfg = ck.config
    sched = make_beta_schedule("linear", run_cfg.T, run_cfg.beta_start, run_cfg.beta_end)
    psi = None
    if plan.kind == "dips-advanced":
        if ck.psi is None:
            raise UsageError("checkpoint has no distilled psi table; run `noisegen distill` first")
        psi = NoiseModel(ck.psi, run_cfg.model)
    return sample(model, plan, clean[None], settings, sched, np.random.default_rng(seed), psi=psi)[0]


def cmd_sample(args, cfg: RunConfig) -> int:
    ck, model = _load_model(args.ckpt, None, args.raw)
    plan = _sampler_plan(args, ck.config)
    src = Path(args.clean)
    files = _list_images(src) if src.is_dir() else [src]
    grid = _settings_grid(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for i, f in enumerate(files):
        clean = io.load_image(f)
        for j, cs in enumerate(grid):
            img = _generate(ck, model, plan, clean, cs, [args.seed, i, j])
            _write_image(out, f"{f.stem}_{_settings_tag(cs)}.f32", img, args.preview)
            n += 1
    print(f"{n} samples ({plan.kind}, {len(plan.steps) - 1} steps) -> {out}")
    return EXIT_OK


def cmd_augment(args, cfg: RunConfig) -> int:
    ck, model = _load_model(args.ckpt, None, args.raw)
    plan = _sampler_plan(args, ck.config)
    files = _list_images(args.clean_dir)
    grid = _settings_grid(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, f, j, cs) for i, f in enumerate(files) for j, cs in enumerate(grid)]
    cleans = {f: io.load_image(f) for f in files}

    def run(job):
        i, f, j, cs = job
        sid = f"{f.stem}_{_settings_tag(cs)}"
        clean_rel = _write_image(out, f"clean/{f.stem}.f32", cleans[f], False)
        noisy_rel = []
        for k in range(args.variants):
            img = _generate(ck, model, plan, cleans[f], cs, [args.seed, i, j, k])
            noisy_rel.append(_write_image(out, f"noisy/{sid}_{k}.f32", img, args.preview))
        return {"scene_id": sid, "clean_path": clean_rel, "noisy_paths": noisy_rel,
                "settings": cs.to_dict(), "profile_name": cs.sensor_type}

    # Model evaluation is not thread-safe on the shared counter; keep it serial.
    records = [run(j) for j in jobs]
    io.write_manifest(out / "manifest.json", records, {"train": [r["scene_id"] for r in records], "val": []},
                      seed=args.seed, extra={"command": "augment", "sampler": plan.kind,
                                             "parameters": "raw" if args.raw else "ema"})
    print(f"{sum(len(r['noisy_paths']) for r in records)} synthetic images -> {out / 'manifest.json'}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    real = io.load_dataset(args.manifest, None)
    scenes = real.split(args.split) if args.split else real.scenes
    if not scenes:
        raise UsageError(f"no scenes in split {args.split!r}")
    generated = None
    if args.generated:
        generated = io.load_dataset(args.generated, None)
    elif args.ckpt:
        ck, model = _load_model(args.ckpt, None, args.raw)
        plan = _sampler_plan(args, ck.config)
    else:
        raise UsageError("eval needs --generated MANIFEST or --ckpt CHECKPOINT")
    akld_cfg = cfg.akld
    records = []
    for i, sc in enumerate(scenes):
        clean = sc.load_clean().astype(np.float64)
        real_noise = [sc.load_noisy(k) - clean for k in range(len(sc.noisy_paths))]
        if generated is not None:
            try:
                g = generated.scene(sc.scene_id)
            except KeyError:
                raise UsageError(f"generated manifest has no scene {sc.scene_id!r}") from None
            gen = [g.load_noisy(k) for k in range(len(g.noisy_paths))]
        else:
            gen = [_generate(ck, model, plan, clean.astype(np.float32), sc.settings, [args.seed, i, k])
                   for k in range(akld_cfg.samples_per_image)]
        gen_noise = [x - clean for x in gen]
        rec = {"scene_id": sc.scene_id}
        if args.metric == "akld":
            rec["akld"] = float(np.mean([akld_from_noise(rn, gen_noise, akld_cfg) for rn in real_noise]))
        elif args.metric == "psnr":
            rec["psnr"] = float(np.mean([psnr(clean + n, clean) for n in gen_noise]))
        elif args.metric == "autocorr":
            rec["autocorr"] = spatial_autocorr(np.stack(gen_noise))[0]
            rec["autocorr_real"] = spatial_autocorr(np.stack(real_noise))[0]
        rec["noise_std"] = float(np.std(np.stack(gen_noise)))
        rec["noise_std_real"] = float(np.std(np.stack(real_noise)))
        records.append(rec)
    agg = {args.metric: float(np.mean([r[args.metric] for r in records])), "n": len(records),
           "seed": args.seed}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, records, agg)
    print(f"{args.metric} = {agg[args.metric]:.5f} over {len(records)} scenes -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_grid(p: argparse.ArgumentParser, sensor_default: str = "sensorA,sensorB") -> None:
    p.add_argument("--iso", default="100,800,3200", help="comma-separated ISO values")
    p.add_argument("--shutter", default="0.01", help="comma-separated exposure times in seconds")
    p.add_argument("--sensor", default=sensor_default, help="comma-separated sensor names")
    p.add_argument("--color-temp", default="5500", help="comma-separated color temperatures in K")
    p.add_argument("--brightness", default="normal", choices=("low", "normal", "high"))


def _add_sampler(p: argparse.ArgumentParser, default: str = "dips-basic") -> None:
    p.add_argument("--sampler", default=default, help=f"one of {', '.join(SAMPLER_KINDS)}")
    p.add_argument("--steps", type=int, default=None, help="number of sampling steps S")
    p.add_argument("--r", type=float, default=None, help="DIPS curvature")
    p.add_argument("--n", type=int, default=None, help="truncation step for dips-advanced")
    p.add_argument("--raw", action="store_true", help="use raw weights instead of the EMA copy")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="RunConfig JSON")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="noisegen", description="Camera-conditioned noise synthesis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", parents=[common], help="print a DIPS step sequence")
    p.add_argument("--t", type=int, default=None)
    p.add_argument("--s", type=int, default=None)
    p.add_argument("--r", type=float, default=None)
    p.set_defaults(func=cmd_schedule, needs_out=False)

    p = sub.add_parser("simulate", parents=[common], help="build a simulated noisy dataset")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--profile", action="append", help="profile JSON overriding a built-in sensor")
    p.add_argument("--captures", type=int, default=1, help="noisy captures per clean and setting")
    p.add_argument("--val", type=int, default=0, help="number of clean images held out for validation")
    p.add_argument("--preview", action="store_true", help="also write 8-bit PNG previews")
    _add_grid(p)
    p.set_defaults(func=cmd_simulate, needs_out=True)

    p = sub.add_parser("train", parents=[common], help="train the noise model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--every", type=int, default=0, help="checkpoint interval in updates")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("distill", parents=[common], help="distil the one-step model psi")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--n", type=int, default=None, help="truncation step")
    p.add_argument("--raw", action="store_true", help="distil from raw weights instead of EMA")
    p.set_defaults(func=cmd_distill, needs_out=True)

    p = sub.add_parser("sample", parents=[common], help="generate noisy images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clean", required=True, help="image file or directory")
    p.add_argument("--preview", action="store_true")
    _add_grid(p, "sensorA")
    _add_sampler(p)
    p.set_defaults(func=cmd_sample, needs_out=True)

    p = sub.add_parser("augment", parents=[common], help="synthesize a noisy training set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--variants", type=int, default=1, help="synthetic images per clean and setting")
    p.add_argument("--preview", action="store_true")
    _add_grid(p, "sensorA")
    _add_sampler(p)
    p.set_defaults(func=cmd_augment, needs_out=True)

    p = sub.add_parser("eval", parents=[common], help="score generated noise against held-out real noise")
    p.add_argument("--manifest", required=True, help="real noisy pairs")
    p.add_argument("--split", default="val")
    p.add_argument("--generated", default=None, help="manifest of generated images with matching scene ids")
    p.add_argument("--ckpt", default=None, help="generate on the fly from this checkpoint")
    p.add_argument("--metric", default="akld", choices=("akld", "psnr", "autocorr"))
    _add_sampler(p)
    p.set_defaults(func=cmd_eval, needs_out=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed < 0 or args.seed >= 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        if args.needs_out and not args.out:
            raise UsageError(f"{args.command} requires --out")
        cfg = load_config(args.config).with_overrides(seed=args.seed)
        return args.func(args, cfg)
    except io.CheckpointMismatchError as exc:
        print(f"noisegen: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (io.MissingFileError, io.FormatError, OSError) as exc:
        print(f"noisegen: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, ProfileError, VocabularyError, io.ManifestError, ValueError) as exc:
        print(f"noisegen: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
