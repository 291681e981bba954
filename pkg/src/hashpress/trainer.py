"""Two-stage training with gradient manipulation.

Stage one trains the codec alone, combining the rate gradient and the
weighted-distortion gradient with the minimum-norm convex combination
(the two-task multiple-gradient-descent rule). Stage two adds the hashing
head and deconflicts the task gradients (pairwise, balance, classification,
and optionally the compression objective) by projecting away negative
components; the codec then trains at a reduced learning rate.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, constant, grad_of
from .codec import CodecConfig, CodecModel, psnr_from_mse
from .dataset import read_tensor_from, write_tensor_to
from .hashhead import HashHead, HashHeadConfig, hashing_loss, make_pair_batch

_CKPT_MAGIC = b"JCKP"
_CKPT_VERSION = 1

LOG_COLUMNS = ("step", "stage", "L_C", "L_p", "L_b", "L_c", "bpp", "psnr")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class TrainSchedule:
    stage1_steps: int = 1200
    stage2_steps: int = 600
    lr: float = 1e-3
    codec_lr_factor: float = 0.1
    batch: int = 8
    seed: int = 0
    early_stop_window: int = 500
    early_stop_tol: float = 1e-3
    pcgrad_include_compression: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0.0 <= self.codec_lr_factor <= 1.0):
            # 0 is the diagnostic freeze: the codec stays bit-identical
            raise ValueError("codec learning-rate factor must be in [0, 1]")

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- gradient manipulation ------------------------------------------------


def mgda_combine(g1, g2):
    """Minimum-norm point of the segment {a*g1 + (1-a)*g2, a in [0,1]}.

    The closed form clips a* = <g2-g1, g2> / ||g1-g2||^2 into [0,1]; for
    coincident gradients either endpoint works, and two zero gradients give
    the zero vector.
    """
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    d = g1 - g2
    denom = float(d @ d)
    if denom == 0.0:
        return g1.copy()
    alpha = float(np.clip((g2 - g1) @ g2 / denom, 0.0, 1.0))
    return alpha * g1 + (1.0 - alpha) * g2


def pcgrad(gradients, rng, trace=None):
    """Project each task gradient off every conflicting one.

    For task i the other tasks are visited in a seeded-random order; whenever
    <g_i, g_j> < 0 the component along the ORIGINAL g_j is removed, making
    <g_i, g_j> exactly zero at that point. Zero-norm opponents are skipped.
    Returns (projected gradients, their sum). When `trace` is a list, one
    (i, j, dot-after-projection) record is appended per projection applied.
    """
    gradients = [np.asarray(g, dtype=np.float64) for g in gradients]
    if len(gradients) < 2:
        raise ValueError("pcgrad needs at least two task gradients")
    dim = gradients[0].size
    if any(g.size != dim for g in gradients):
        raise ValueError("task gradients must cover identical parameter subsets")
    norms_sq = [float(g @ g) for g in gradients]
    projected = []
    for i in range(len(gradients)):
        g = gradients[i].copy()
        others = [j for j in range(len(gradients)) if j != i]
        order = rng.permutation(len(others))
        for idx in order:
            j = others[idx]
            if norms_sq[j] == 0.0:
                continue
            dot = float(g @ gradients[j])
            if dot < 0.0:
                g -= (dot / norms_sq[j]) * gradients[j]
                if trace is not None:
                    trace.append((i, j, float(g @ gradients[j])))
        projected.append(g)
    return projected, np.sum(projected, axis=0)


# -- optimizer --------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer over a named parameter dict.

    lr_factors maps name prefixes to multipliers; the longest matching
    prefix wins (used for the reduced codec rate in stage two).
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, lr_factors=None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.lr_factors = lr_factors or {}
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def _rate_for(self, name):
        best = ""
        for prefix in self.lr_factors:
            if name.startswith(prefix) and len(prefix) > len(best):
                best = prefix
        return self.lr * self.lr_factors.get(best, 1.0) if best else self.lr

    def step(self, grads):
        """grads: name -> array; missing names are treated as zero gradient."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient for {name}",
                                       snapshot={"param": name, "step": self.t})
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p.data -= self._rate_for(name) * mhat / (np.sqrt(vhat) + self.eps)


def flatten_task_gradient(grad_list):
    return np.concatenate([g.ravel() for g in grad_list])


def unflatten_to(params, names, flat):
    out = {}
    pos = 0
    for n in names:
        size = params[n].size
        out[n] = flat[pos:pos + size].reshape(params[n].shape)
        pos += size
    return out


# -- training loops ----------------------------------------------------------


def _sample_batch(rng, n, batch):
    return np.sort(rng.choice(n, size=min(batch, n), replace=n < batch))


def _window_means(losses, window):
    blocks = len(losses) // window
    return [float(np.mean(losses[i * window:(i + 1) * window])) for i in range(blocks)]


def stage1_train(images, model, schedule, log_rows=None):
    """Train the codec alone; returns the per-step log rows.

    Each step takes two backward passes (rate task, weighted-distortion task),
    combines them with the min-norm rule, and applies one optimizer step.
    """
    n = len(images)
    rng = np.random.default_rng([schedule.seed, 1])
    names = list(model.params)
    params_list = [model.params[k] for k in names]
    adam = Adam(model.params, schedule.lr)
    rows = log_rows if log_rows is not None else []
    losses = []
    for step in range(schedule.stage1_steps):
        idx = _sample_batch(rng, n, schedule.batch)
        x = constant(images[idx])
        tape = Tape()
        out = model.compression_loss(tape, x, "training", rng)
        loss_val = float(out["loss"].data)
        if not math.isfinite(loss_val):
            raise TrainingDiverged("compression loss diverged",
                                   snapshot={"step": step, "bpp": out["bpp"], "mse": out["mse"]})
        g_rate = flatten_task_gradient(grad_of(tape, out["rate_task"], params_list))
        g_dist = flatten_task_gradient(grad_of(tape, out["dist_task"], params_list))
        # Min-norm combination only where the tasks actually conflict; on
        # non-conflicting steps it would reduce to the smaller gradient alone
        # (ignoring the other task entirely), so descend the sum instead.
        if g_rate @ g_dist < 0.0:
            combined = mgda_combine(g_rate, g_dist)
        else:
            combined = g_rate + g_dist
        adam.step(unflatten_to(model.params, names, combined))
        losses.append(loss_val)
        rows.append([step, 1, loss_val, "", "", "", out["bpp"], out["psnr"]])
        w = schedule.early_stop_window
        if w and len(losses) >= 2 * w and len(losses) % w == 0:
            means = _window_means(losses, w)
            if means[-2] - means[-1] < schedule.early_stop_tol * abs(means[-2]):
                break
    return rows


def stage2_train(images, labels, model, head, schedule, log_rows=None):
    """Joint training: hashing-task gradients (and optionally the compression
    task) are deconflicted with pcgrad; codec parameters move at a reduced rate."""
    n = len(images)
    rng = np.random.default_rng([schedule.seed, 2])
    params = dict(model.params)
    params.update(head.params)
    names = list(params)
    params_list = [params[k] for k in names]
    adam = Adam(params, schedule.lr, lr_factors={"codec.": schedule.codec_lr_factor})
    rows = log_rows if log_rows is not None else []
    for step in range(schedule.stage2_steps):
        idx = _sample_batch(rng, n, schedule.batch)
        x = constant(images[idx])
        tape = Tape()
        out = model.compression_loss(tape, x, "training", rng)
        logits, code, probs = head.forward(tape, out["latent"])
        pair_batch = make_pair_batch(labels[idx])
        parts = hashing_loss(tape, code, probs, labels[idx], pair_batch, head.config)
        values = {
            "L_C": float(out["loss"].data),
            "L_p": float(parts["pairwise"].data),
            "L_b": float(parts["balance"].data),
            "L_c": float(parts["classification"].data),
        }
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingDiverged("stage-2 loss diverged", snapshot={"step": step, **values})
        tasks = [parts["pairwise"], parts["balance"], parts["classification"]]
        if schedule.pcgrad_include_compression:
            tasks.append(out["loss"])
        task_grads = [flatten_task_gradient(grad_of(tape, t, params_list)) for t in tasks]
        _, total = pcgrad(task_grads, rng)
        adam.step(unflatten_to(params, names, total))
        rows.append([step, 2, values["L_C"], values["L_p"], values["L_b"], values["L_c"],
                     out["bpp"], out["psnr"]])
    return rows


def eval_psnr(model, images, batch=16):
    """Mean inference-mode reconstruction PSNR over a held-out image set."""
    total_mse = 0.0
    count = 0
    for start in range(0, len(images), batch):
        x = np.asarray(images[start:start + batch])
        tape = Tape()
        y = model.encode(tape, constant(x))
        q = model.quantize(tape, y, "inference")
        x_hat = model.decode(tape, q)
        d = x - x_hat.data
        total_mse += float((d * d).sum())
        count += x.size
    return psnr_from_mse(total_mse / count)


def write_log(path, rows):
    lines = [",".join(LOG_COLUMNS)]
    for row in rows:
        lines.append(",".join("" if v == "" else _fmt(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, model, head=None, schedule=None, stage=0, extra=None):
    header = {
        "codec_config": model.config.to_dict(),
        "codec_seed": model.seed,
        "hash_config": head.config.to_dict() if head else None,
        "schedule": schedule.to_dict() if schedule else None,
        "stage": stage,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = {**model.params, **(head.params if head else {})}
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<BI", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            write_tensor_to(fh, name, tensors[name].data)
    return path


def load_checkpoint(path):
    """Returns (codec model, hash head or None, header dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, blob_len = struct.unpack("<BI", fh.read(5))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            name, arr = read_tensor_from(fh)
            tensors[name] = arr
    model = CodecModel(CodecConfig.from_dict(header["codec_config"]), seed=header.get("codec_seed", 0))
    head = None
    if header.get("hash_config"):
        head = HashHead(HashHeadConfig.from_dict(header["hash_config"]),
                        latent_channels=model.config.latent_channels,
                        seed=header.get("codec_seed", 0))
    for target in ([model.params] + ([head.params] if head else [])):
        for name, p in target.items():
            if name not in tensors:
                raise ValueError(f"checkpoint missing tensor {name}")
            if tensors[name].shape != p.data.shape:
                raise ValueError(f"checkpoint tensor {name} has shape {tensors[name].shape}, "
                                 f"expected {p.data.shape}")
            p.data = tensors[name].copy()
    return model, head, header
