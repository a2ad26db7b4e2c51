"""Run orchestration: dataset synthesis, the training loop, test-split
evaluation, and the numerical health checks behind diag/grad-check.

Everything downstream of a RunConfig is deterministic: per-sample
seeds derive from the dataset seed, epoch shuffles from the run seed
and epoch index, and no artifact embeds wall-clock state, so a rerun
with the same config produces byte-identical files.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from dataclasses import dataclass, fields

import numpy as np
import torch

from .attention import AttentionGate, AxialAttention, MHA1d, count_axial_macs
from .conv import Conv1x1, Conv2d, Conv3d, ConvUp2x, DepthwiseConv2d, \
    DepthwiseConv3d
from .diffops import clear_caches, collect_ops, fd_gradcheck
from .geometry import MIP_AXES, mip, paper_geometry, toy_geometry
from .kan import KanLayer, KanStack
from .koopman import KoopmanBlock
from .losses import PercExtractor, perc_loss, total_loss
from .metrics import psnr, ssim_volume, write_metric_report
from .model import Pipeline, TokKan3d, TokenBlock2d, load_model, save_model
from .optim import Adam, PlateauScheduler
from .ops import GroupNorm, InstanceNorm, LayerNorm, Linear, ReLU, SiLU, \
    Sigmoid, Softplus, Tanh
from .physics import make_phantom, synthesize_px
from .preprocess import normalize_scan
from . import volio

__all__ = [
    "RunConfig", "UsageError", "NumericalError",
    "cmd_gen_data", "cmd_train", "cmd_eval", "cmd_diag", "cmd_grad_check",
    "load_dataset", "split_counts", "run_gradient_suite", "GRAD_TOL",
]

SPLITS = ("train", "val", "test")
GRAD_TOL = 1e-4
MAC_SIZES = ((8, 8, 16), (8, 16, 32), (8, 32, 64))  # (C, H, W)


class UsageError(Exception):
    """Bad config or command line; maps to exit code 1."""


class NumericalError(Exception):
    """NaN/Inf or a failed numerical check; maps to exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scale: str = "toy"
    n_phantoms: int = 10
    split: tuple = (0.8, 0.1, 0.1)
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    plateau_factor: float = 0.5
    plateau_patience: int = 15
    min_lr: float = 1e-5
    early_stop_patience: int = 20
    lambda_proj: float = 1e-3
    lambda_perc: float = 1e-2
    data_dir: str = "data"
    checkpoint: str = None

    def __post_init__(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise UsageError("seed must be a non-negative integer")
        if self.scale not in ("toy", "paper"):
            raise UsageError(f"scale must be toy or paper, got {self.scale!r}")
        if self.n_phantoms < 3:
            raise UsageError("need at least 3 phantoms (one per split)")
        if len(self.split) != 3 or any(r <= 0 for r in self.split):
            raise UsageError("split must be three positive ratios")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise UsageError(f"split ratios sum to {sum(self.split)}, not 1")
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.lr <= 0 or self.min_lr <= 0:
            raise UsageError("learning rates must be positive")
        if not 0 < self.plateau_factor < 1:
            raise UsageError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise UsageError("patience values must be >= 1")
        if self.lambda_proj < 0 or self.lambda_perc < 0:
            raise UsageError("loss weights must be non-negative")

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise UsageError("config root must be an object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "split" in raw:
            raw["split"] = tuple(raw["split"])
        try:
            return cls(**raw)
        except TypeError as e:
            raise UsageError(str(e)) from e

    def geometry(self):
        return toy_geometry() if self.scale == "toy" else paper_geometry()

    def rows(self) -> int:
        return 32 if self.scale == "toy" else 128


def split_counts(n: int, ratios) -> list:
    """Largest-remainder split of n samples; every split must land at
    least one sample."""
    raw = [n * r for r in ratios]
    base = [int(np.floor(x)) for x in raw]
    rem = n - sum(base)
    order = np.argsort([b - x for b, x in zip(base, raw)], kind="stable")
    for i in order[:rem]:
        base[i] += 1
    if any(c == 0 for c in base):
        raise UsageError(f"{n} phantoms cannot cover split {tuple(ratios)}")
    return base


def _build_pipeline(cfg: RunConfig) -> Pipeline:
    pipe = Pipeline(cfg.geometry(), rows=cfg.rows(),
                    rng=np.random.default_rng(cfg.seed))
    pipe.astype(np.float32)
    if cfg.checkpoint is not None:
        try:
            load_model(cfg.checkpoint, pipe)
        except OSError as e:
            raise UsageError(f"cannot read checkpoint: {e}") from e
    return pipe


# ------------------------------------------------------------------ gen-data

def cmd_gen_data(cfg: RunConfig, out_dir):
    """Synthesize n_phantoms (volume, panoramic) pairs plus the split
    manifest. Volumes are stored in the training-target domain
    (normalized to [0, 255]); panoramics are stored raw, so every
    pixel lies in (0, 255] by construction of the beam model."""
    os.makedirs(out_dir, exist_ok=True)
    geom = cfg.geometry()
    counts = split_counts(cfg.n_phantoms, cfg.split)
    labels = [s for s, c in zip(SPLITS, counts) for _ in range(c)]
    seeds = np.random.default_rng(cfg.seed).integers(
        0, 2 ** 63 - 1, size=cfg.n_phantoms)
    rows = []
    for i, (label, s) in enumerate(zip(labels, seeds)):
        ph = make_phantom(int(s), rows=cfg.rows(), geom=geom)
        px = synthesize_px(ph.volume, geom)
        vol = normalize_scan(ph.volume)
        px_file, vol_file = f"px_{i:04d}.kvol", f"vol_{i:04d}.kvol"
        volio.write_volume(os.path.join(out_dir, px_file), px)
        volio.write_volume(os.path.join(out_dir, vol_file), vol)
        rows.append([i, label, int(s), px_file, vol_file])
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "split", "seed", "px_file", "vol_file"])
        w.writerows(rows)
    return dict(zip(SPLITS, counts))


def load_dataset(data_dir):
    """manifest.csv -> {split: [(sample_id, px, volume), ...]}."""
    path = os.path.join(data_dir, "manifest.csv")
    if not os.path.exists(path):
        raise UsageError(f"no manifest at {path}; run gen-data first")
    out = {s: [] for s in SPLITS}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] not in out:
                raise UsageError(f"manifest names unknown split {row['split']!r}")
            px = volio.read_volume(os.path.join(data_dir, row["px_file"]))
            vol = volio.read_volume(os.path.join(data_dir, row["vol_file"]))
            out[row["split"]].append((int(row["sample_id"]), px, vol))
    return out


# ------------------------------------------------------------------ train

def _dump_param_norms(pipe: Pipeline, stream=None):
    stream = stream or sys.stderr
    print("parameter norms at failure:", file=stream)
    for i, p in enumerate(pipe.params()):
        norm = float(np.sqrt(np.sum(p.data.astype(np.float64) ** 2)))
        print(f"  p{i:04d} {p.name or '?'} |w|={norm:.6e}", file=stream)


def _check_finite(value: float, what: str, pipe: Pipeline):
    if not np.isfinite(value):
        _dump_param_norms(pipe)
        raise NumericalError(f"{what} is not finite ({value})")


def _val_loss(pipe, ext, val_set, cfg) -> float:
    total = 0.0
    for _, x, y in val_set:
        out = pipe.forward(x)
        value, _, _ = total_loss(out.V, y, ext, cfg.lambda_proj,
                                 cfg.lambda_perc)
        clear_caches(pipe)
        clear_caches(ext)
        total += value
    return total / len(val_set)


def cmd_train(cfg: RunConfig, out_dir):
    """Single-sample SGD over the train split with Adam, plateau lr
    halving, best-checkpoint tracking on the val loss, and early
    stopping. Writes one train_log.csv row per completed epoch."""
    os.makedirs(out_dir, exist_ok=True)
    data = load_dataset(cfg.data_dir)
    if not data["train"] or not data["val"]:
        raise UsageError("dataset lacks train or val samples")
    train_set = [(sid, normalize_scan(px).astype(np.float32),
                  vol.astype(np.float32)) for sid, px, vol in data["train"]]
    val_set = [(sid, normalize_scan(px).astype(np.float32),
                vol.astype(np.float32)) for sid, px, vol in data["val"]]

    pipe = _build_pipeline(cfg)
    ext = PercExtractor().astype(np.float32)
    opt = Adam(pipe.params(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    sched = PlateauScheduler(opt, factor=cfg.plateau_factor,
                             patience=cfg.plateau_patience, min_lr=cfg.min_lr)

    log_path = os.path.join(out_dir, "train_log.csv")
    ckpt_path = os.path.join(out_dir, "best.ckpt")
    best_val = np.inf
    stale = 0
    epochs_run = 0
    # denormal stalls dominate the step time otherwise; scoped here so
    # float64 code elsewhere keeps ieee subnormals
    torch.set_flush_denormal(True)
    try:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for epoch in range(1, cfg.epochs + 1):
                order = np.random.default_rng(
                    [cfg.seed, epoch]).permutation(len(train_set))
                running = 0.0
                for j in order:
                    _, x, y = train_set[j]
                    out = pipe.forward(x)
                    value, grad, _ = total_loss(out.V, y, ext, cfg.lambda_proj,
                                                cfg.lambda_perc)
                    _check_finite(value, f"train loss (epoch {epoch})", pipe)
                    pipe.backward(grad)
                    opt.step()
                    opt.zero_grad()
                    running += value
                train_loss = running / len(train_set)
                val = _val_loss(pipe, ext, val_set, cfg)
                _check_finite(val, f"val loss (epoch {epoch})", pipe)
                lr_now = sched.step(val)
                w.writerow([epoch, f"{train_loss:.6f}", f"{val:.6f}",
                            f"{lr_now:.8f}"])
                fh.flush()
                epochs_run = epoch
                if val < best_val:
                    best_val = val
                    stale = 0
                    save_model(ckpt_path, pipe)
                else:
                    stale += 1
                    if stale >= cfg.early_stop_patience:
                        break
    finally:
        torch.set_flush_denormal(False)
    return {"epochs_run": epochs_run, "best_val": float(best_val),
            "checkpoint": ckpt_path, "log": log_path}


# ------------------------------------------------------------------ eval

def cmd_eval(cfg: RunConfig, out_dir):
    """PSNR/SSIM/perceptual distance per test sample plus mean and std
    rows, and maximum-intensity projections of prediction and target
    along all three views as container files."""
    os.makedirs(out_dir, exist_ok=True)
    data = load_dataset(cfg.data_dir)
    if not data["test"]:
        raise UsageError("dataset has no test samples")
    pipe = _build_pipeline(cfg)
    ext = PercExtractor().astype(np.float32)

    rows = []
    scores = []
    for sid, px, vol in data["test"]:
        x = normalize_scan(px).astype(np.float32)
        pred = pipe.forward(x).V
        gt = vol.astype(np.float32)
        dist, _ = perc_loss(pred, gt, ext)
        clear_caches(pipe)
        clear_caches(ext)
        p = psnr(pred.astype(np.float64), gt.astype(np.float64))
        s = ssim_volume(pred.astype(np.float64), gt.astype(np.float64))
        rows.append((f"{sid:04d}", p, s, dist))
        scores.append((p, s, dist))
        for view in MIP_AXES:
            volio.write_volume(
                os.path.join(out_dir, f"mip_{sid:04d}_{view}_pred.kvol"),
                mip(pred, view))
            volio.write_volume(
                os.path.join(out_dir, f"mip_{sid:04d}_{view}_gt.kvol"),
                mip(gt, view))
    arr = np.array(scores, dtype=np.float64)
    mean = arr.mean(axis=0)
    std = arr.std(axis=0)
    rows.append(("mean", mean[0], mean[1], mean[2]))
    rows.append(("std", std[0], std[1], std[2]))
    write_metric_report(os.path.join(out_dir, "metrics.csv"), rows)
    return {"mean_psnr": float(mean[0]), "mean_ssim": float(mean[1]),
            "mean_perc": float(mean[2]), "n_samples": len(scores)}


# ------------------------------------------------------------------ diag

def _single_input_case(make_op, x_shape, out_shape=None):
    """FD closures over an op's parameters and its single input."""
    def build(seed):
        rng = np.random.default_rng(seed)
        op = make_op(rng)
        x = rng.standard_normal(x_shape)
        arrays = [p.data for p in op.params()] + [x]

        def fwd():
            clear_caches(op)
            return op.forward(x)

        def grads(G):
            op.zero_grad()
            clear_caches(op)
            op.forward(x)
            gx = op.backward(G)
            return [p.grad.copy() for p in op.params()] + [gx]

        return fwd, grads, arrays
    return build


def _gate_case(skip_shape, ctx_shape, inter=4):
    def build(seed):
        rng = np.random.default_rng(seed)
        op = AttentionGate(skip_shape[0], ctx_shape[0], inter, rng=rng)
        skip = rng.standard_normal(skip_shape)
        ctx = rng.standard_normal(ctx_shape)
        arrays = [p.data for p in op.params()] + [skip, ctx]

        def fwd():
            clear_caches(op)
            return op.forward(skip, ctx)

        def grads(G):
            op.zero_grad()
            clear_caches(op)
            op.forward(skip, ctx)
            gs, gc = op.backward(G)
            return [p.grad.copy() for p in op.params()] + [gs, gc]

        return fwd, grads, arrays
    return build


GRAD_SUITE = [
    ("sigmoid", _single_input_case(lambda rng: Sigmoid(), (5, 7))),
    ("tanh", _single_input_case(lambda rng: Tanh(), (5, 7))),
    ("softplus", _single_input_case(lambda rng: Softplus(), (5, 7))),
    ("silu", _single_input_case(lambda rng: SiLU(), (5, 7))),
    ("relu", _single_input_case(lambda rng: ReLU(), (5, 7))),
    ("layer_norm", _single_input_case(lambda rng: LayerNorm(6), (4, 6))),
    ("instance_norm",
     _single_input_case(lambda rng: InstanceNorm(3), (3, 4, 5))),
    ("group_norm", _single_input_case(lambda rng: GroupNorm(2, 4), (4, 5, 3))),
    ("linear", _single_input_case(lambda rng: Linear(5, 4, rng=rng), (6, 5))),
    ("conv2d_s1", _single_input_case(lambda rng: Conv2d(3, 4, rng=rng),
                                     (3, 6, 5))),
    ("conv2d_s2", _single_input_case(
        lambda rng: Conv2d(3, 4, stride=2, rng=rng), (3, 6, 8))),
    ("conv3d_s1", _single_input_case(lambda rng: Conv3d(2, 3, rng=rng),
                                     (2, 4, 5, 6))),
    ("conv3d_s2", _single_input_case(
        lambda rng: Conv3d(2, 3, stride=2, rng=rng), (2, 4, 6, 6))),
    ("conv1x1", _single_input_case(lambda rng: Conv1x1(3, 5, rng=rng),
                                   (3, 4, 6))),
    ("up2x_2d", _single_input_case(lambda rng: ConvUp2x(3, 2, 2, rng=rng),
                                   (3, 4, 5))),
    ("up2x_3d", _single_input_case(lambda rng: ConvUp2x(2, 3, 3, rng=rng),
                                   (2, 3, 4, 3))),
    ("depthwise2d", _single_input_case(
        lambda rng: DepthwiseConv2d(3, rng=rng), (3, 6, 5))),
    ("depthwise3d", _single_input_case(
        lambda rng: DepthwiseConv3d(2, rng=rng), (2, 4, 5, 4))),
    ("kan_layer", _single_input_case(lambda rng: KanLayer(4, 3, rng=rng),
                                     (8, 4))),
    ("kan_stack", _single_input_case(
        lambda rng: KanStack([3, 4, 3], rng=rng), (6, 3))),
    ("koopman", _single_input_case(
        lambda rng: KoopmanBlock(4, rho=0.1, rng=rng), (7, 4))),
    ("mha", _single_input_case(lambda rng: MHA1d(6, 2, rng=rng), (5, 6))),
    ("axial_attn", _single_input_case(
        lambda rng: AxialAttention(4, heads=2, rng=rng), (4, 5, 6))),
    ("attention_gate", _gate_case((3, 6, 4), (5, 3, 2))),
    ("token_block", _single_input_case(
        lambda rng: TokenBlock2d(4, rng=rng), (4, 4, 6))),
    ("tok_kan3d", _single_input_case(
        lambda rng: TokKan3d(4, rng=rng), (4, 3, 4, 3))),
]


def run_gradient_suite(n_probes: int = 120, seed: int = 0):
    """Central-difference check of every op's VJPs in float64; returns
    [(name, worst_rel_err)] in suite order."""
    results = []
    for i, (name, build) in enumerate(GRAD_SUITE):
        fwd, grads, arrays = build(seed + i)
        worst = fd_gradcheck(fwd, grads, arrays, n_probes=n_probes,
                             seed=seed + i)
        results.append((name, worst))
    return results


def koopman_spectrum(pipe: Pipeline):
    """(block_index, mode, real, imag, magnitude) for every spectral
    block in the model, in collection order."""
    rows = []
    blocks = [op for op in collect_ops(pipe) if isinstance(op, KoopmanBlock)]
    for bi, blk in enumerate(blocks):
        re, im, mag = blk.lambda_parts()
        for mi in range(blk.dim):
            rows.append((bi, mi, float(re[mi]), float(im[mi]),
                         float(mag[mi])))
    return rows


def mac_scaling():
    """Core attention MACs at growing extents with the analytic
    H*W*C*(H+W) predictor and the fitted log-log slope (1 = linear)."""
    rows = []
    for C, H, W in MAC_SIZES:
        counts = count_axial_macs(C, H, W)
        core = counts["width_core"] + counts["height_core"]
        rows.append((C, H, W, core, H * W * C * (H + W)))
    logs = np.log([r[3] for r in rows])
    preds = np.log([r[4] for r in rows])
    slope = float(np.polyfit(preds, logs, 1)[0])
    return rows, slope


def _write_grad_csv(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["op", "max_rel_err"])
        for name, worst in results:
            w.writerow([name, f"{worst:.3e}"])


def cmd_grad_check(cfg: RunConfig, out_dir):
    """Full-resolution gradient audit; fails (exit 2) past 1e-4."""
    os.makedirs(out_dir, exist_ok=True)
    results = run_gradient_suite(n_probes=120, seed=cfg.seed)
    _write_grad_csv(os.path.join(out_dir, "gradcheck.csv"), results)
    worst = max(err for _, err in results)
    if worst > GRAD_TOL:
        bad = ", ".join(n for n, e in results if e > GRAD_TOL)
        raise NumericalError(f"gradient check failed for {bad} "
                             f"(worst {worst:.3e} > {GRAD_TOL})")
    return {"worst": worst, "n_ops": len(results)}


def cmd_diag(cfg: RunConfig, out_dir):
    """Spectrum dump, abbreviated gradient audit, and the attention
    op-count scaling table."""
    os.makedirs(out_dir, exist_ok=True)
    pipe = _build_pipeline(cfg)
    with open(os.path.join(out_dir, "spectrum.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "mode", "real", "imag", "magnitude"])
        for row in koopman_spectrum(pipe):
            w.writerow([row[0], row[1], f"{row[2]:.9f}", f"{row[3]:.9f}",
                        f"{row[4]:.9f}"])

    results = run_gradient_suite(n_probes=10, seed=cfg.seed)
    _write_grad_csv(os.path.join(out_dir, "gradcheck.csv"), results)
    worst = max(err for _, err in results)

    rows, slope = mac_scaling()
    with open(os.path.join(out_dir, "opcounts.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["C", "H", "W", "core_macs", "predicted", "slope"])
        for (C, H, W, core, pred) in rows:
            w.writerow([C, H, W, core, pred, f"{slope:.6f}"])

    if worst > GRAD_TOL:
        raise NumericalError(f"gradient check failed (worst {worst:.3e})")
    if abs(slope - 1.0) > 0.1:
        raise NumericalError(f"attention op count grows with log-log slope "
                             f"{slope:.3f}, expected ~1 vs HWC(H+W)")
    return {"worst_grad": worst, "mac_slope": slope,
            "n_spectrum_modes": len(koopman_spectrum(pipe))}
