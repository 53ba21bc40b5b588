"""Command-line entry point.

Subcommands cover the whole experiment lifecycle: generate-data,
pretrain, train-controller, assimilate, evaluate, verify-math, plot.
Every artifact-producing command writes a JSON manifest next to its
output (command, config snapshot, input hashes, seed, timings), and
`--print-config` on the pipeline commands shows the effective
configuration as diff-able sectioned text without running anything.
"""

import argparse
import json
import sys
import time
from dataclasses import asdict, fields, replace

import numpy as np
import torch

from . import io
from .ardm import load_ardm_checkpoint, pretrain_ardm, tweedie_estimate
from .assimilate import bon_rollout, bon_seed_pool, rollout_chunked, tto_rollout
from .controller import ControllerNet, load_controller_checkpoint
from .errors import InvalidInput, NumericalError, SimulationDiverged
from .metrics import (dissipation_rate, hct, last_index_above, rmse,
                      total_variation)
from .obs import (ObsStream, apply_downsample, build_stream, mask_cost,
                  pack_streams, regime_from_name, select_active, unpack_streams)
from .oracle import (fd_gradient, linear_gaussian_tweedie, random_chain,
                     verify_tilt_optimality)
from .pde import (KolmogorovConfig, KSConfig, generate_dataset, load_dataset,
                  pde_config_meta, save_dataset)
from .plots import (dissipation_curves, error_heatmap, snapshot_grid,
                    streamfunction, tv_curves)
from .presets import PRESETS, preset
from .schedule import NoiseSchedule
from .training import train_controller


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S")


# ---------------------------------------------------------------------------
# Sectioned key-value config text.

def _format_value(value):
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def render_config(sections):
    """Line-oriented text form of nested config sections."""
    lines = []
    for name, body in sections.items():
        lines.append(f"[{name}]")
        for key, value in body.items():
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def parse_config(text):
    """Inverse of render_config; values stay strings until applied."""
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
        elif "=" in line and current is not None:
            key, value = line.split("=", 1)
            sections[current][key.strip()] = value.strip()
        else:
            raise InvalidInput(f"config line {lineno}: expected '[section]' or 'key = value'")
    return sections


def _coerce(text, default):
    """Parse ``text`` to the type of ``default``."""
    if isinstance(default, bool):
        low = str(text).strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise InvalidInput(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, (tuple, list)):
        items = [p.strip() for p in str(text).strip("()[]").split(",") if p.strip()]
        elem = default[0] if len(default) else 1
        return tuple(_coerce(p, elem) for p in items)
    return str(text)


def apply_section(cfg, overrides):
    """Dataclass copy with string overrides coerced to field types."""
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    updates = {}
    for key, value in overrides.items():
        if key not in known:
            raise InvalidInput(f"unknown key {key!r} for {type(cfg).__name__}")
        updates[key] = _coerce(value, known[key])
    return replace(cfg, **updates)


def _apply_pde_section(cfg, overrides):
    overrides = dict(overrides)
    kind = overrides.pop("pde_kind", None)
    if kind is not None:
        wanted = {"ks": KSConfig, "kolmogorov": KolmogorovConfig}.get(kind)
        if wanted is None:
            raise InvalidInput(f"unknown pde kind {kind!r}")
        if not isinstance(cfg, wanted):
            cfg = wanted()
    return apply_section(cfg, overrides)


def _read_config_file(path):
    with open(path) as fh:
        return parse_config(fh.read())


class Bundle:
    """Effective configuration for one command: preset + file + flags."""

    def __init__(self, args):
        self.preset = preset(getattr(args, "preset", None) or "ks-desk")
        self.pde = self.preset.pde
        self.unet = self.preset.unet
        self.pretrain = self.preset.pretrain
        self.controller = self.preset.controller
        self.train = self.preset.train
        self.extras = {}
        if getattr(args, "config", None):
            for name, body in _read_config_file(args.config).items():
                if name == "pde":
                    self.pde = _apply_pde_section(self.pde, body)
                elif name == "unet":
                    self.unet = apply_section(self.unet, body)
                elif name == "pretrain":
                    self.pretrain = apply_section(self.pretrain, body)
                elif name == "controller":
                    self.controller = apply_section(self.controller, body)
                elif name == "train":
                    self.train = apply_section(self.train, body)
                else:
                    raise InvalidInput(f"unknown config section [{name}]")

    def sections(self, command_section=None):
        out = {
            "experiment": {
                "preset": self.preset.name,
                "regime": self.preset.regime,
                "n_train": self.preset.n_train,
                "n_val": self.preset.n_val,
                "n_test": self.preset.n_test,
                "train_frames": self.preset.train_frames,
                "test_frames": self.preset.test_frames,
                "eval_steps": self.preset.eval_steps,
                "bon_candidates": self.preset.bon_candidates,
                "hct_threshold": self.preset.hct_threshold,
                "dataset_seed": self.preset.dataset_seed,
            },
            "pde": pde_config_meta(self.pde),
            "unet": asdict(self.unet),
            "pretrain": asdict(self.pretrain),
            "controller": asdict(self.controller),
            "train": asdict(self.train),
        }
        if command_section:
            out.update(command_section)
        out.update(self.extras)
        return out


def _maybe_print_config(args, sections):
    if getattr(args, "print_config", False):
        print(render_config(sections), end="")
        return True
    return False


# ---------------------------------------------------------------------------
# generate-data

def cmd_generate_data(args):
    bundle = Bundle(args)
    pde_cfg = bundle.pde
    if args.kind:
        wanted = {"ks": KSConfig, "kolmogorov": KolmogorovConfig}[args.kind]
        if args.preset and not isinstance(pde_cfg, wanted):
            raise InvalidInput(f"--kind {args.kind} conflicts with preset "
                               f"{bundle.preset.name}")
        if not isinstance(pde_cfg, wanted):
            pde_cfg = wanted()
    if args.grid:
        pde_cfg = replace(pde_cfg, n=args.grid)
    n_traj = args.n if args.n is not None else (
        bundle.preset.n_train + bundle.preset.n_val if args.split == "train"
        else bundle.preset.n_test)
    n_frames = args.length if args.length is not None else (
        bundle.preset.train_frames if args.split == "train"
        else bundle.preset.test_frames)
    n_val = args.n_val
    if n_val is None:
        n_val = bundle.preset.n_val if (args.split == "train" and args.preset) else 0
    if args.split != "train" and n_val:
        raise InvalidInput("--n-val only applies to --split train")
    if n_val >= n_traj:
        raise InvalidInput(f"--n-val {n_val} must be below --n {n_traj}")
    regime_name = args.regime if args.regime is not None else (
        bundle.preset.regime if args.preset else None)
    if regime_name and regime_name.lower() == "none":
        regime_name = None

    command = {"generate": {
        "kind": "ks" if isinstance(pde_cfg, KSConfig) else "kolmogorov",
        "n": n_traj, "length": n_frames, "seed": args.seed,
        "split": args.split, "n_val": n_val,
        "regime": regime_name or "none", "noise_std": args.noise_std,
        "burn_in": args.burn_in, "out": args.out or "",
    }}
    bundle.pde = pde_cfg
    sections = bundle.sections(command)
    if _maybe_print_config(args, sections):
        return 0
    if not args.out:
        raise InvalidInput("--out is required")

    started = _now()
    states = generate_dataset(pde_cfg, n_traj, n_frames, args.seed,
                              burn_in=args.burn_in)
    tags = [args.split] * n_traj
    if args.split == "train" and n_val:
        tags = ["train"] * (n_traj - n_val) + ["val"] * n_val
    extra_arrays = extra_meta = None
    if regime_name:
        regime = regime_from_name(regime_name)
        children = np.random.SeedSequence(args.seed).spawn(n_traj)
        streams = [
            build_stream(states[i], regime,
                         noise_seed=int(children[i].generate_state(1)[0]),
                         noise_std=args.noise_std, traj_id=i)
            for i in range(n_traj)
        ]
        extra_arrays, extra_meta = pack_streams(streams)
        extra_meta["noise_std"] = args.noise_std
    out_hash = save_dataset(args.out, states, tags, pde_cfg, args.seed,
                            burn_in=args.burn_in, extra_arrays=extra_arrays,
                            extra_meta=extra_meta)
    io.write_manifest(args.out, "generate-data", sections, {}, args.seed,
                      started, metrics={"n_trajectories": n_traj,
                                        "n_frames": n_frames},
                      output_hash=out_hash)
    print(f"wrote {args.out} ({n_traj} trajectories x {n_frames} frames)")
    return 0


# ---------------------------------------------------------------------------
# pretrain

def cmd_pretrain(args):
    bundle = Bundle(args)
    pcfg = bundle.pretrain
    if args.steps is not None:
        pcfg = replace(pcfg, steps=args.steps)
    if args.batch_size is not None:
        pcfg = replace(pcfg, batch_size=args.batch_size)
    if args.lr is not None:
        pcfg = replace(pcfg, lr=args.lr)
    pcfg = replace(pcfg, seed=args.seed)
    bundle.pretrain = pcfg
    command = {"run": {"data": args.data, "out": args.out, "seed": args.seed}}
    sections = bundle.sections(command)
    if _maybe_print_config(args, sections):
        return 0
    if not args.out:
        raise InvalidInput("--out is required")

    started = _now()
    states, tags, _, _, _ = load_dataset(args.data)
    train_states = states[tags == "train"]
    if not len(train_states):
        raise InvalidInput(f"{args.data} has no train split")
    if bundle.unet.spatial_ndim != train_states.ndim - 3:
        raise InvalidInput(
            f"data is {train_states.ndim - 3}-D but the backbone config says "
            f"{bundle.unet.spatial_ndim}-D")
    log_path = args.log or args.out + ".log.jsonl"
    _, _, history = pretrain_ardm(train_states, bundle.unet, pcfg,
                                  checkpoint_path=args.out, log_path=log_path)
    metrics = dict(history[-1]) if history else {}
    io.write_manifest(args.out, "pretrain", sections,
                      {"data": io.container_content_hash(args.data)},
                      args.seed, started, metrics=metrics,
                      output_hash=io.container_content_hash(args.out))
    print(f"wrote {args.out} (final loss {metrics.get('loss', float('nan')):.4g})")
    return 0


# ---------------------------------------------------------------------------
# train-controller

def _streams_for(states, tags, arrays, meta, rows, regime_name):
    """Per-row observation streams: embedded if they match, else rebuilt."""
    regime = regime_from_name(regime_name)
    if "obs_values" in arrays:
        embedded = unpack_streams(arrays, meta)
        if embedded and embedded[0].regime == regime:
            return [embedded[i] for i in rows]
    return [build_stream(states[i], regime, traj_id=i) for i in rows]


def cmd_train_controller(args):
    bundle = Bundle(args)
    tcfg = bundle.train
    regime_name = args.regime or bundle.preset.regime
    if args.preview is not None:
        tcfg = replace(tcfg, horizon=args.preview)
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    if args.lr is not None:
        tcfg = replace(tcfg, lr=args.lr)
    if args.gamma is not None:
        tcfg = replace(tcfg, gamma=args.gamma)
    if args.batch_windows is not None:
        tcfg = replace(tcfg, batch_windows=args.batch_windows)
    tcfg = replace(tcfg, seed=args.seed)
    bundle.train = tcfg
    command = {"run": {"data": args.data, "ardm": args.ardm, "out": args.out,
                       "regime": regime_name, "seed": args.seed}}
    sections = bundle.sections(command)
    if _maybe_print_config(args, sections):
        return 0
    if not args.out:
        raise InvalidInput("--out is required")

    started = _now()
    states, tags, _, meta, arrays = load_dataset(args.data)
    rows = np.flatnonzero(tags == "train")
    if not len(rows):
        raise InvalidInput(f"{args.data} has no train split")
    streams = _streams_for(states, tags, arrays, meta, rows, regime_name)
    ardm, _ = load_ardm_checkpoint(args.ardm, use_ema=True)
    ccfg = bundle.controller
    if ccfg.spatial_ndim != states.ndim - 3:
        raise InvalidInput(
            f"data is {states.ndim - 3}-D but the controller config says "
            f"{ccfg.spatial_ndim}-D")
    net = ControllerNet(ccfg)
    log_path = args.log or args.out + ".log.jsonl"
    _, history = train_controller(ardm, net, states[rows], streams, tcfg,
                                  log_path=log_path, checkpoint_path=args.out)
    tail = [h for h in history if not h.get("skipped")]
    metrics = dict(tail[-1]) if tail else {}
    io.write_manifest(args.out, "train-controller", sections,
                      {"data": io.container_content_hash(args.data),
                       "ardm": io.container_content_hash(args.ardm)},
                      args.seed, started, metrics=metrics,
                      output_hash=io.container_content_hash(args.out))
    print(f"wrote {args.out} (final loss {metrics.get('loss', float('nan')):.4g})")
    return 0


# ---------------------------------------------------------------------------
# assimilate

def _select_rows(tags, split):
    if split == "all":
        return np.arange(len(tags))
    rows = np.flatnonzero(tags == split)
    if not len(rows):
        raise InvalidInput(f"no rows with split {split!r}")
    return rows


def cmd_assimilate(args):
    if args.method == "cada" and not args.ctrl:
        raise InvalidInput("--ctrl is required for method 'cada'")
    started = _now()
    arrays, meta = io.load_container(args.stream)
    if meta.get("kind") != "dataset":
        raise InvalidInput(f"{args.stream}: not a dataset container")
    names = meta.get("split_names", ["train", "val", "test"])
    tags = np.asarray([names[c] for c in arrays["split"]])
    states = arrays["states"]
    rows = _select_rows(tags, args.split)
    n_frames = states.shape[1]
    horizon = args.horizon if args.horizon is not None else n_frames - 1
    if horizon < 1:
        raise InvalidInput(f"--horizon must be >= 1, got {horizon}")

    regime_name = args.regime
    if regime_name is None and "regime_kind" in meta:
        stored = unpack_streams(arrays, meta)
        streams = [stored[i] for i in rows]
    else:
        if regime_name is None:
            raise InvalidInput(f"{args.stream} holds no observation streams; "
                               "pass --regime to build them")
        regime = regime_from_name(regime_name)
        streams = [build_stream(states[i], regime, traj_id=i) for i in rows]

    ardm, _ = load_ardm_checkpoint(args.ardm, use_ema=True)
    input_hashes = {"ardm": io.container_content_hash(args.ardm),
                    "stream": io.container_content_hash(args.stream)}

    net = None
    preview = args.preview
    gamma = args.gamma
    if args.method == "cada":
        net, cmeta = load_controller_checkpoint(args.ctrl)
        stored_hash = cmeta.get("ardm_hash")
        kind = cmeta.get("ardm_hash_kind", "params")
        actual = (ardm.params_hash() if kind == "params"
                  else io.container_content_hash(args.ardm))
        if stored_hash != actual:
            raise InvalidInput(
                f"backbone hash mismatch: controller was trained against "
                f"{kind} hash {stored_hash}, but {args.ardm} has {actual}")
        if preview is None:
            preview = int(cmeta["horizon"])
        if gamma is None:
            gamma = float(cmeta.get("gamma", 1.0))
        ctrl_regime = (cmeta.get("regime_kind"), int(cmeta.get("regime_factor", 0)))
        got = (streams[0].regime.kind, streams[0].regime.factor)
        if ctrl_regime != got:
            print(f"warning: controller trained on regime {ctrl_regime}, "
                  f"streams use {got}", file=sys.stderr)
        input_hashes["ctrl"] = io.container_content_hash(args.ctrl)
    if preview is None:
        preview = 16
    if gamma is None:
        gamma = 1.0

    config = {"run": {"method": args.method, "stream": args.stream,
                      "ardm": args.ardm, "ctrl": args.ctrl or "",
                      "split": args.split, "horizon": horizon,
                      "preview": preview, "gamma": gamma,
                      "candidates": args.n, "inner_steps": args.inner_steps,
                      "lr": args.lr, "seed": args.seed, "out": args.out}}
    if getattr(args, "print_config", False):
        print(render_config(config), end="")
        return 0
    if not args.out:
        raise InvalidInput("--out is required")

    child_seeds = bon_seed_pool(args.seed, len(rows))
    reports = []
    run_metrics = {}
    if args.method == "cada":
        x0 = torch.as_tensor(states[rows, 0])
        generator = torch.Generator().manual_seed(args.seed)
        out = rollout_chunked(ardm, net, x0, streams, horizon, preview,
                              generator, gamma=gamma)
        out_states = out.permute(1, 0, *range(2, out.dim())).numpy()
    else:
        rolled = []
        for i, row in enumerate(rows):
            x0 = torch.as_tensor(states[row, 0])
            if args.method == "unguided":
                gen = torch.Generator().manual_seed(child_seeds[i])
                z = ardm.rollout(ardm.normalize(x0)[None], horizon, gen)
                rolled.append(ardm.denormalize(z[:, 0]))
            elif args.method == "bon":
                report = []
                rolled.append(bon_rollout(ardm, x0, streams[i], horizon,
                                          args.n, child_seeds[i], report=report))
                reports.append(report[0])
            else:
                report = []
                gen = torch.Generator().manual_seed(child_seeds[i])
                rolled.append(tto_rollout(ardm, x0, streams[i], horizon,
                                          preview, gen,
                                          inner_steps=args.inner_steps,
                                          lr=args.lr, report=report))
                reports.append(report)
        out_states = torch.stack(rolled).numpy()
    out_states = np.asarray(out_states, dtype=np.float32)

    if args.method == "bon":
        run_metrics["mean_best_cost"] = float(np.mean(
            [r["costs"][r["chosen"]] for r in reports]))
    elif args.method == "tto":
        opt = [rec for rep in reports for rec in rep
               if rec["cost_initial"] is not None]
        run_metrics["optimized_steps"] = len(opt)
        run_metrics["fallback_steps"] = sum(r["fallback"] for r in opt)
        if opt:
            run_metrics["mean_cost_initial"] = float(
                np.mean([r["cost_initial"] for r in opt]))
            run_metrics["mean_cost_committed"] = float(
                np.mean([r["cost_committed"] for r in opt]))

    out_meta = {
        "kind": "trajectory",
        "method": args.method,
        "seed": args.seed,
        "horizon": horizon,
        "preview": preview,
        "gamma": gamma,
        "split": args.split,
        "traj_rows": [int(r) for r in rows],
        "traj_ids": [int(s.traj_id) for s in streams],
        "regime_kind": streams[0].regime.kind,
        "regime_factor": streams[0].regime.factor,
        "pde": meta.get("pde"),
        "stream_hash": input_hashes["stream"],
        "ardm_hash": input_hashes["ardm"],
    }
    if args.method == "bon":
        out_meta["candidates"] = args.n
    if args.method == "tto":
        out_meta["inner_steps"] = args.inner_steps
        out_meta["lr"] = args.lr
    out_hash = io.save_container(args.out, {"states": out_states}, out_meta)
    io.write_manifest(args.out, "assimilate", config, input_hashes, args.seed,
                      started, metrics=run_metrics, output_hash=out_hash)
    print(f"wrote {args.out} ({args.method}, {len(rows)} trajectories x "
          f"{horizon} steps)")
    return 0


# ---------------------------------------------------------------------------
# evaluate

def cmd_evaluate(args):
    started = _now()
    run_arrays, run_meta = io.load_container(args.run)
    if run_meta.get("kind") != "trajectory":
        raise InvalidInput(f"{args.run}: not a trajectory container")
    pred_all = run_arrays["states"]
    truth_states, _, pde_cfg, _, _ = load_dataset(args.truth)
    rows = run_meta.get("traj_rows", list(range(pred_all.shape[0])))
    if max(rows) >= truth_states.shape[0]:
        raise InvalidInput(f"{args.truth} has {truth_states.shape[0]} rows but "
                           f"the run references row {max(rows)}")
    steps = min(pred_all.shape[1], truth_states.shape[1] - 1)
    if args.steps is not None:
        if args.steps > steps:
            raise InvalidInput(f"--steps {args.steps} exceeds available {steps}")
        steps = args.steps
    spatial_ndim = pred_all.ndim - 3
    dt = float(getattr(pde_cfg, "dt", 1.0))
    nu = float(getattr(pde_cfg, "nu", 1.0))
    length = float(getattr(pde_cfg, "length", 2.0 * np.pi))

    per = []
    tv_rows, tv_true_rows, eps_rows, eps_true_rows = [], [], [], []
    for i, row in enumerate(rows):
        pred = pred_all[i, :steps].astype(np.float64)
        true = truth_states[row, 1:steps + 1].astype(np.float64)
        idx, t_hct = hct(pred, true, threshold=args.threshold, dt=dt)
        entry = {"traj_row": int(row), "rmse": rmse(pred, true),
                 "hct_index": int(idx), "hct_time": float(t_hct)}
        if spatial_ndim == 1:
            tv = [total_variation(f) for f in pred]
            tv_true = [total_variation(f) for f in true]
            entry["tv_series"] = tv
            tv_rows.append(tv)
            tv_true_rows.append(tv_true)
        else:
            eps = [dissipation_rate(streamfunction(f[0], length), nu, length)
                   for f in pred]
            eps_true = [dissipation_rate(streamfunction(f[0], length), nu, length)
                        for f in true]
            entry["dissipation_series"] = eps
            eps_rows.append(eps)
            eps_true_rows.append(eps_true)
        per.append(entry)

    report = {
        "method": run_meta.get("method", "unknown"),
        "n_trajectories": len(rows),
        "horizon": int(steps),
        "threshold": args.threshold,
        "dt": dt,
        "rmse": float(np.mean([p["rmse"] for p in per])),
        "hct_index": float(np.mean([p["hct_index"] for p in per])),
        "hct_time": float(np.mean([p["hct_time"] for p in per])),
        "per_trajectory": per,
    }
    if tv_rows:
        report["tv_series"] = np.mean(tv_rows, axis=0).tolist()
        report["truth_tv_series"] = np.mean(tv_true_rows, axis=0).tolist()
    if eps_rows:
        report["dissipation_series"] = np.mean(eps_rows, axis=0).tolist()
        report["truth_dissipation_series"] = np.mean(eps_true_rows, axis=0).tolist()

    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    io.write_manifest(args.out, "evaluate",
                      {"run": {"run": args.run, "truth": args.truth,
                               "threshold": args.threshold, "steps": steps}},
                      {"run": io.container_content_hash(args.run),
                       "truth": io.container_content_hash(args.truth)},
                      args.seed, started,
                      metrics={"rmse": report["rmse"],
                               "hct_index": report["hct_index"],
                               "hct_time": report["hct_time"]})
    print(f"{report['method']}: rmse {report['rmse']:.4g}, "
          f"hct {report['hct_index']:.1f} steps over {len(rows)} trajectories")
    return 0


# ---------------------------------------------------------------------------
# plot

def _run_label(meta, path, used):
    base = meta.get("method") or path
    label = base
    k = 2
    while label in used:
        label = f"{base}-{k}"
        k += 1
    used.add(label)
    return label


def cmd_plot(args):
    started = _now()
    truth_states, _, pde_cfg, truth_meta, truth_arrays = load_dataset(args.truth)
    runs = {}
    first_meta = None
    used = set()
    for path in args.run:
        arrays, meta = io.load_container(path)
        if meta.get("kind") != "trajectory":
            raise InvalidInput(f"{path}: not a trajectory container")
        if first_meta is None:
            first_meta = meta
        runs[_run_label(meta, path, used)] = (arrays["states"], meta)
    rows = first_meta.get("traj_rows", [0])
    if args.traj < 0 or args.traj >= len(rows):
        raise InvalidInput(f"--traj {args.traj} outside the run's "
                           f"{len(rows)} trajectories")
    row = rows[args.traj]
    first_states = next(iter(runs.values()))[0]
    steps = min(first_states.shape[1], truth_states.shape[1] - 1)
    truth_frames = truth_states[row, 1:steps + 1].astype(np.float64)

    def pred_frames(states):
        if states.shape[1] < steps:
            raise InvalidInput("runs disagree on horizon")
        return states[args.traj, :steps].astype(np.float64)

    if args.kind == "heatmap":
        if "obs_values" not in truth_arrays:
            raise InvalidInput(f"{args.truth} holds no observation streams "
                               "(regenerate with --regime) so markers cannot "
                               "be drawn")
        stream = unpack_streams(truth_arrays, truth_meta)[row]
        error_heatmap(pred_frames(first_states), truth_frames, stream,
                      args.out, title=args.title)
    elif args.kind == "snapshots":
        if args.steps:
            snap = [int(p) for p in args.steps.split(",")]
        else:
            snap = sorted({max(1, steps // 4), max(1, steps // 2), steps})
        snapshot_grid(pred_frames(first_states), truth_frames, snap, args.out,
                      title=args.title)
    elif args.kind == "tv":
        tv_curves({k: pred_frames(v[0]) for k, v in runs.items()},
                  truth_frames, args.out, title=args.title)
    else:
        nu = float(getattr(pde_cfg, "nu", 1.0))
        length = float(getattr(pde_cfg, "length", 2.0 * np.pi))
        dissipation_curves({k: pred_frames(v[0]) for k, v in runs.items()},
                           truth_frames, nu, args.out, length=length,
                           title=args.title)
    io.write_manifest(args.out, "plot",
                      {"run": {"kind": args.kind, "runs": list(args.run),
                               "truth": args.truth, "traj": args.traj}},
                      {f"run{i}": io.container_content_hash(p)
                       for i, p in enumerate(args.run)},
                      args.seed, started)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# verify-math

def _check_schedule(rng):
    sched = NoiseSchedule(3)
    s = np.arange(4, dtype=np.float64)
    lam = 9.0 - 18.0 * s / 3.0
    mu = np.sqrt(1.0 / (1.0 + np.exp(-lam)))
    sigma = np.sqrt(1.0 / (1.0 + np.exp(lam)))
    mu[0], sigma[0] = 1.0, 0.0
    err = max(np.abs(sched.mu - mu).max(), np.abs(sched.sigma - sigma).max())
    unit = np.abs(sched.mu ** 2 + sched.sigma ** 2 - 1.0).max()
    ok = err <= 1e-12 and unit <= 1e-12 and sched.sigma[-1] > 0.999
    return ok, f"table err {err:.1e}, unit err {unit:.1e}"


def _check_tilt(rng):
    betas = [0.5, 1.0, 5.0]
    worst = 0.0
    violations = 0
    for i in range(20):
        chain = random_chain(rng, alphabet_size=int(rng.integers(2, 4)),
                             horizon=int(rng.integers(1, 4)),
                             beta=betas[i % 3])
        rep = verify_tilt_optimality(chain, trials=10_000,
                                     seed=int(rng.integers(2 ** 31)))
        worst = max(worst, rep.stationarity)
        violations += rep.n_violations
        if not rep.passed:
            return False, f"chain {i}: residual {rep.stationarity:.2e}, " \
                          f"{rep.n_violations} violations"
    return violations == 0, f"20 chains, 0 violations, max residual {worst:.1e}"


def _check_tweedie(rng):
    sched = NoiseSchedule(3)
    worst = 0.0
    for s in (1, 2, 3):
        m, v = float(rng.normal()), float(rng.uniform(0.2, 2.0))
        mu_s, sig_s = sched.mu[s], sched.sigma[s]

        def denoiser(z, step, cond):
            x0 = torch.as_tensor(linear_gaussian_tweedie(
                mu_s, sig_s, m, v, z.numpy()))
            eps = (z - mu_s * x0) / sig_s
            return (mu_s * eps - sig_s * x0).to(z.dtype)

        z = torch.as_tensor(rng.normal(size=(2, 1, 8)))
        got = tweedie_estimate(sched, denoiser, z, s, None).numpy()
        want = linear_gaussian_tweedie(mu_s, sig_s, m, v, z.numpy())
        worst = max(worst, float(np.abs(got - want).max()))
    return worst <= 1e-10, f"max deviation {worst:.1e}"


def _check_fd(rng):
    a = rng.normal(size=(5, 5))
    a = a + a.T
    b = rng.normal(size=5)
    x = rng.normal(size=5)
    grad = fd_gradient(lambda p: float(p @ a @ p + b @ p), x)
    want = 2.0 * a @ x + b
    err = float(np.abs(grad - want).max() / np.abs(want).max())
    return err <= 1e-6, f"relative error {err:.1e}"


def _check_selector(rng):
    from .obs import ObsRegime
    regime = ObsRegime("mask", 2, every=1)
    for trial in range(2000):
        k = int(rng.integers(0, 6))
        times = np.sort(rng.choice(np.arange(1, 30), size=k, replace=False))
        values = np.zeros((k, 1, 4), np.float32)
        masks = np.ones((k, 1, 4), np.float32)
        stream = ObsStream(regime=regime, times=times, values=values,
                           masks=masks, spatial_ndim=1)
        t0 = int(rng.integers(0, 25))
        lam = int(rng.integers(1, 9))
        t = t0 + int(rng.integers(0, lam))
        got = select_active(stream, t, t0, lam)
        cands = [int(j) for j in times if t + 1 <= j <= t0 + lam]
        want = min(cands) if cands else None
        if got.time != want or got.empty != (want is None):
            return False, f"trial {trial}: got {got.time}, want {want}"
    return True, "2000 random streams match brute force"


def _check_mask_cost(rng):
    x = torch.as_tensor(rng.normal(size=(2, 8, 8)))
    y = torch.as_tensor(rng.normal(size=(2, 8, 8)))
    mask = torch.as_tensor((rng.uniform(size=(1, 8, 8)) > 0.5).astype(float))
    got = float(mask_cost(x, y, mask))
    acc, count = 0.0, 0.0
    for c in range(2):
        for i in range(8):
            for j in range(8):
                m = float(mask[0, i, j])
                acc += (m * float(x[c, i, j] - y[c, i, j])) ** 2
                count += m
    want = acc / count
    err = abs(got - want)
    return err <= 1e-10, f"deviation {err:.1e}"


def _check_downsample(rng):
    worst = 0.0
    for shape, ndim in (((1, 16), 1), ((1, 8, 8), 2)):
        x = rng.normal(size=shape)
        once = apply_downsample(x, 2, ndim)
        twice = apply_downsample(once, 2, ndim)
        worst = max(worst, float(np.abs(once - twice).max()))
    return worst <= 1e-12, f"idempotence deviation {worst:.1e}"


def _check_hct(rng):
    for trial in range(2000):
        series = rng.uniform(-1.0, 1.0, size=int(rng.integers(2, 40)))
        phi = float(rng.uniform(-0.5, 0.99))
        got = last_index_above(series, phi)
        want = None
        for i, c in enumerate(series):
            if c >= phi:
                want = i
        if got != want:
            return False, f"trial {trial}: got {got}, want {want}"
    return True, "2000 random sequences match direct scan"


def _check_tv(rng):
    xi = np.linspace(0.0, 2.0 * np.pi, 256, endpoint=False)
    got = total_variation(np.sin(xi)[None])
    err = abs(got - 4.0) / 4.0
    return err <= 0.01, f"sin TV {got:.4f} vs 4 ({err:.2%})"


def _check_dissipation(rng):
    n, nu = 128, 0.025
    xi = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    z = np.sin(xi)[None, :] * np.ones((n, 1))
    got = dissipation_rate(z, nu)
    want = nu * 2.0 * np.pi ** 2
    err = abs(got - want) / want
    return err <= 0.01, f"sin dissipation {got:.5f} vs {want:.5f} ({err:.2%})"


VERIFY_CHECKS = [
    ("noise schedule table", _check_schedule),
    ("tilt optimality (20 chains x 10k)", _check_tilt),
    ("tweedie vs linear-Gaussian closed form", _check_tweedie),
    ("finite-difference gradient probe", _check_fd),
    ("nearest-arrival selector vs brute force", _check_selector),
    ("mask cost vs loop oracle", _check_mask_cost),
    ("downsample idempotence", _check_downsample),
    ("high-correlation time vs direct scan", _check_hct),
    ("total variation of sin vs analytic", _check_tv),
    ("dissipation of sin vs analytic", _check_dissipation),
]


def cmd_verify_math(args):
    rng = np.random.default_rng(args.seed)
    failures = 0
    width = max(len(name) for name, _ in VERIFY_CHECKS)
    for name, check in VERIFY_CHECKS:
        t0 = time.time()
        ok, detail = check(rng)
        status = "PASS" if ok else "FAIL"
        failures += not ok
        print(f"{status}  {name:<{width}}  {detail} [{time.time() - t0:.2f}s]")
    print(f"{len(VERIFY_CHECKS) - failures}/{len(VERIFY_CHECKS)} checks passed")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="cada",
        description="Guided autoregressive-diffusion forecasting with sparse "
                    "future observations.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add_common(p, with_config=True):
        p.add_argument("--seed", type=int, default=0, help="global RNG seed")
        if with_config:
            p.add_argument("--preset", choices=sorted(PRESETS),
                           help="named experiment configuration")
            p.add_argument("--config", help="sectioned key-value config file")
            p.add_argument("--print-config", action="store_true",
                           help="print the effective config and exit")

    p = sub.add_parser("generate-data", help="simulate truth trajectories")
    add_common(p)
    p.add_argument("--kind", choices=("ks", "kolmogorov"))
    p.add_argument("--grid", type=int, help="spatial resolution override")
    p.add_argument("--n", type=int, help="number of trajectories")
    p.add_argument("--length", type=int, help="frames per trajectory")
    p.add_argument("--split", choices=("train", "val", "test"), default="train")
    p.add_argument("--n-val", type=int, help="tail trajectories tagged val")
    p.add_argument("--regime", help="embed observation streams (e.g. MS-4; "
                                    "'none' to skip)")
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--burn-in", type=int, default=200)
    p.add_argument("--out", help="output dataset container")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("pretrain", help="train the diffusion backbone")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--log", help="training log path (default <out>.log.jsonl)")
    p.add_argument("--out", help="output checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-controller", help="fit the preview controller")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ardm", required=True)
    p.add_argument("--regime", help="observation regime (e.g. ms4)")
    p.add_argument("--lambda", dest="preview", type=int,
                   help="preview horizon (window length)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--batch-windows", type=int)
    p.add_argument("--log", help="training log path (default <out>.log.jsonl)")
    p.add_argument("--out", help="output checkpoint")
    p.set_defaults(func=cmd_train_controller)

    p = sub.add_parser("assimilate", help="roll out forecasts against streams")
    p.add_argument("--method", required=True,
                   choices=("cada", "tto", "bon", "unguided"))
    p.add_argument("--ardm", required=True)
    p.add_argument("--stream", required=True,
                   help="dataset container with observation streams")
    p.add_argument("--ctrl", help="controller checkpoint (cada)")
    p.add_argument("--split", choices=("train", "val", "test", "all"),
                   default="test")
    p.add_argument("--horizon", type=int, help="rollout length (default: all "
                                               "frames after the initial one)")
    p.add_argument("--preview", type=int, help="preview horizon override")
    p.add_argument("--regime", help="rebuild streams under this regime")
    p.add_argument("--n", type=int, default=16, help="candidates (bon)")
    p.add_argument("--inner-steps", type=int, default=20, help="tto iterations")
    p.add_argument("--lr", type=float, default=0.05, help="tto step size")
    p.add_argument("--gamma", type=float, help="control strength override")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--print-config", action="store_true")
    p.add_argument("--out", help="output trajectory container")
    p.set_defaults(func=cmd_assimilate)

    p = sub.add_parser("evaluate", help="score a rollout against the truth")
    p.add_argument("--run", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--threshold", type=float, default=0.9,
                   help="correlation threshold for HCT")
    p.add_argument("--steps", type=int, help="evaluate only the first N steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify-math", help="run the analytic oracle battery")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify_math)

    p = sub.add_parser("plot", help="figures from evaluated runs")
    p.add_argument("--run", action="append", required=True,
                   help="trajectory container (repeat for overlays)")
    p.add_argument("--truth", required=True)
    p.add_argument("--kind", required=True,
                   choices=("heatmap", "snapshots", "tv", "dissipation"))
    p.add_argument("--traj", type=int, default=0,
                   help="trajectory index within the run")
    p.add_argument("--steps", help="comma-separated snapshot steps")
    p.add_argument("--title", default="")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InvalidInput, NumericalError, SimulationDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
