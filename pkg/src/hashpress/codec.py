"""Learned transform codec: conv encoder/decoder, additive-noise quantization,
hyper-prior side information, Gaussian-mixture entropy model, and the
rate-distortion loss.

Layout is NHWC throughout. Rates are measured in bits. The quantizer adds
U(-1/2, 1/2) noise during training and rounds half away from zero at
inference; both paths are explicit tape primitives so every loss gradient
can be checked against finite differences.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc as _erfc

from . import counters
from .autodiff import ShapeError, Tape, Tensor, constant

PROB_FLOOR = 2.0 ** -32
SCALE_FLOOR = 1e-6
LOGIT_CLIP = 30.0
DIST_PEAK = 255.0  # rate-distortion normalizer: lambda * n_values * DIST_PEAK^2 * MSE

_INV_SQRT2 = float(2.0 ** -0.5)
_INV_LN2 = float(1.0 / math.log(2.0))


def _softplus_inv(y):
    return float(np.log(np.expm1(y)))


@dataclass
class CodecConfig:
    image_channels: int = 3
    widths: tuple = (32, 64)
    latent_channels: int = 16
    downsample: int = 4
    hyper_widths: tuple = (32, 48)
    hyper_channels: int = 8
    mixtures: int = 3
    lam: float = 0.1
    density_hidden: int = 3

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.mixtures < 1:
            raise ValueError("mixture count must be >= 1")
        f = self.downsample
        if f < 1 or f & (f - 1):
            raise ValueError("downsample factor must be a power of two")
        if int(math.log2(f)) > len(self.widths):
            raise ValueError("not enough encoder stages for the downsample factor")

    def to_dict(self):
        return {
            "image_channels": self.image_channels,
            "widths": list(self.widths),
            "latent_channels": self.latent_channels,
            "downsample": self.downsample,
            "hyper_widths": list(self.hyper_widths),
            "hyper_channels": self.hyper_channels,
            "mixtures": self.mixtures,
            "lam": self.lam,
            "density_hidden": self.density_hidden,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["hyper_widths"] = tuple(d["hyper_widths"])
        return cls(**d)


@dataclass
class GaussianMixtureParams:
    """Per latent element: K simplex weights, K means, K floored scales."""

    weights: Tensor
    means: Tensor
    scales: Tensor


def _param_rng(seed, name):
    digest = hashlib.sha256(name.encode()).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:4], "little")])


def conv_param(params, seed, name, kh, kw, cin, cout, bias_fill=0.0):
    rng = _param_rng(seed, name)
    fan_in = kh * kw * cin
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(kh, kw, cin, cout))
    params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
    params[f"{name}.b"] = Tensor(np.full(cout, bias_fill), requires_grad=True, name=f"{name}.b")


class FactorizedDensity:
    """Monotone per-channel CDF: stack of softplus-weighted affine maps with
    bounded tanh gates, closed by a sigmoid. Non-decreasing in the input with
    limits 0 and 1, evaluable at arbitrary reals."""

    def __init__(self, params, prefix, channels, hidden, seed):
        self.prefix = prefix
        self.channels = channels
        widths = [1, hidden, hidden, 1]
        self.widths = widths
        for k in range(len(widths) - 1):
            din, dout = widths[k], widths[k + 1]
            rng = _param_rng(seed, f"{prefix}.layer{k}")
            h0 = _softplus_inv(1.0 / din) + rng.normal(0.0, 0.01, size=(channels, din, dout))
            params[f"{prefix}.h{k}"] = Tensor(h0, requires_grad=True, name=f"{prefix}.h{k}")
            b0 = rng.uniform(-1.0, 1.0, size=(channels, 1, dout))
            params[f"{prefix}.b{k}"] = Tensor(b0, requires_grad=True, name=f"{prefix}.b{k}")
            if k < len(widths) - 2:
                params[f"{prefix}.a{k}"] = Tensor(
                    np.zeros((channels, 1, dout)), requires_grad=True, name=f"{prefix}.a{k}"
                )
        self.params = params

    def cdf(self, tape, u):
        """u: (channels, m, 1) -> CDF values (channels, m, 1)."""
        x = u
        n_layers = len(self.widths) - 1
        for k in range(n_layers):
            h = tape.softplus(self.params[f"{self.prefix}.h{k}"])
            x = tape.matmul(x, h)
            x = tape.badd(x, self.params[f"{self.prefix}.b{k}"])
            if k < n_layers - 1:
                gate = tape.tanh(self.params[f"{self.prefix}.a{k}"])
                gate = tape.expand_to(gate, x.shape)
                x = tape.add(x, tape.mul(gate, tape.tanh(x)))
        return tape.sigmoid(x)

    def cdf_numpy(self, values):
        """CDF on a plain (channels, m) array, for building coder tables."""
        tape = Tape()
        u = constant(np.asarray(values, dtype=np.float64)[:, :, None])
        return self.cdf(tape, u).data[:, :, 0]


class CodecModel:
    """Encoder/decoder pair with hyper-prior entropy model."""

    def __init__(self, config, seed=0):
        self.config = config
        self.seed = seed
        params = {}
        c = config
        n_stride2 = int(math.log2(c.downsample))
        chain = [c.image_channels, *c.widths, c.latent_channels]
        self.enc_strides = [2 if i < n_stride2 else 1 for i in range(len(chain) - 1)]
        for i in range(len(chain) - 1):
            conv_param(params, seed, f"codec.enc{i}", 3, 3, chain[i], chain[i + 1])
        dec_chain = [c.latent_channels, *reversed(c.widths), c.image_channels]
        # one 2x upsample per stride-2 encoder stage, never after the last conv
        self.dec_upsamples = [i < n_stride2 for i in range(len(dec_chain) - 1)]
        for i in range(len(dec_chain) - 1):
            fill = 0.5 if i == len(dec_chain) - 2 else 0.0  # start reconstructions mid-gray
            conv_param(params, seed, f"codec.dec{i}", 3, 3, dec_chain[i], dec_chain[i + 1], bias_fill=fill)
        hw = c.hyper_widths
        conv_param(params, seed, "codec.henc0", 3, 3, c.latent_channels, hw[0])
        conv_param(params, seed, "codec.henc1", 3, 3, hw[0], c.hyper_channels)
        conv_param(params, seed, "codec.hdec0", 3, 3, c.hyper_channels, hw[0])
        conv_param(params, seed, "codec.hdec1", 3, 3, hw[0], hw[1])
        conv_param(params, seed, "codec.hdec2", 1, 1, hw[1], 3 * c.mixtures * c.latent_channels)
        # initial mixture scales ~1 keep early rate gradients well-conditioned
        raw = params["codec.hdec2.b"].data
        raw[2 * c.mixtures * c.latent_channels:] = _softplus_inv(1.0)
        self.density = FactorizedDensity(params, "codec.density", c.hyper_channels, c.density_hidden, seed)
        self.params = params

    # -- forward pieces --------------------------------------------------

    def encode(self, tape, x):
        """Image batch (N,H,W,C) -> latent (N,H/f,W/f,c_lat); deterministic."""
        c = self.config
        if x.shape[1] % c.downsample or x.shape[2] % c.downsample:
            raise ShapeError(
                f"image {x.shape[1]}x{x.shape[2]} not divisible by factor {c.downsample}; "
                "reflect-pad first (pad_to_multiple)"
            )
        h = x
        n = len(self.enc_strides)
        for i, stride in enumerate(self.enc_strides):
            h = tape.conv2d(h, self.params[f"codec.enc{i}.w"], stride=stride, pad=1)
            h = tape.badd(h, self.params[f"codec.enc{i}.b"])
            if i < n - 1:
                h = tape.relu(h)
        return h

    def decode(self, tape, q):
        counters.NEURAL_DECODES += 1
        c = self.config
        if q.shape[3] != c.latent_channels:
            raise ShapeError(f"latent channels {q.shape[3]} != {c.latent_channels}")
        h = q
        n = len(self.dec_upsamples)
        for i, up in enumerate(self.dec_upsamples):
            h = tape.conv2d(h, self.params[f"codec.dec{i}.w"], stride=1, pad=1)
            h = tape.badd(h, self.params[f"codec.dec{i}.b"])
            if i < n - 1:
                h = tape.relu(h)
            if up:
                h = tape.upsample2x(h)
        return tape.clip(h, 0.0, 1.0)

    def quantize(self, tape, y, mode, rng=None):
        if mode == "inference":
            return tape.ste_round(y)
        if mode == "training":
            if rng is None:
                raise ValueError("training-mode quantization needs a seeded rng")
            noise = constant(rng.uniform(-0.5, 0.5, size=y.shape))
            return tape.add(y, noise)
        raise ValueError(f"unknown quantization mode {mode!r}")

    def hyper_encode(self, tape, y):
        h = tape.conv2d(y, self.params["codec.henc0.w"], stride=2, pad=1)
        h = tape.badd(h, self.params["codec.henc0.b"])
        h = tape.relu(h)
        h = tape.conv2d(h, self.params["codec.henc1.w"], stride=1, pad=1)
        return tape.badd(h, self.params["codec.henc1.b"])

    def hyper_decode(self, tape, z):
        c = self.config
        h = tape.conv2d(z, self.params["codec.hdec0.w"], stride=1, pad=1)
        h = tape.badd(h, self.params["codec.hdec0.b"])
        h = tape.relu(h)
        h = tape.upsample2x(h)
        h = tape.conv2d(h, self.params["codec.hdec1.w"], stride=1, pad=1)
        h = tape.badd(h, self.params["codec.hdec1.b"])
        h = tape.relu(h)
        h = tape.conv2d(h, self.params["codec.hdec2.w"], stride=1, pad=0)
        h = tape.badd(h, self.params["codec.hdec2.b"])
        k, cl = c.mixtures, c.latent_channels
        n, hh, ww, _ = h.shape
        raw_w = tape.slice_axis(h, 3, 0, k * cl)
        raw_m = tape.slice_axis(h, 3, k * cl, 2 * k * cl)
        raw_s = tape.slice_axis(h, 3, 2 * k * cl, 3 * k * cl)
        shape5 = (n, hh, ww, cl, k)
        logits = tape.clip(tape.reshape(raw_w, shape5), -LOGIT_CLIP, LOGIT_CLIP)
        e = tape.exp(logits)
        total = tape.expand_to(tape.sum(e, axis=4, keepdims=True), shape5)
        weights = tape.div(e, total)
        means = tape.reshape(raw_m, shape5)
        scales = tape.scale_shift(tape.softplus(tape.reshape(raw_s, shape5)), 1.0, SCALE_FLOOR)
        return GaussianMixtureParams(weights, means, scales)

    def mixture_params_numpy(self, z_tilde):
        """Mixture params for a decoded hyper-latent, flattened to (m, K) arrays
        in the row-major element order of the latent tensor."""
        tape = Tape()
        gmm = self.hyper_decode(tape, constant(z_tilde))
        k = self.config.mixtures
        return (
            gmm.weights.data.reshape(-1, k),
            gmm.means.data.reshape(-1, k),
            gmm.scales.data.reshape(-1, k),
        )

    # -- rates -----------------------------------------------------------

    def latent_rate(self, tape, q, gmm):
        """Total bits of q under the mixture model: sum of -log2 P(q)."""
        k = self.config.mixtures
        qe = tape.expand_to(tape.reshape(q, (*q.shape, 1)), (*q.shape, k))
        up = tape.norm_cdf(tape.div(tape.sub(tape.scale_shift(qe, 1.0, 0.5), gmm.means), gmm.scales))
        dn = tape.norm_cdf(tape.div(tape.sub(tape.scale_shift(qe, 1.0, -0.5), gmm.means), gmm.scales))
        p = tape.sum(tape.mul(gmm.weights, tape.sub(up, dn)), axis=4)
        p = tape.clip_min(p, PROB_FLOOR)
        return tape.scale_shift(tape.sum(tape.log(p)), -_INV_LN2, 0.0)

    def hyper_rate(self, tape, z):
        """Total bits of z under the factorized density."""
        n, h, w, c = z.shape
        zt = tape.reshape(tape.transpose(z, (3, 0, 1, 2)), (c, n * h * w, 1))
        up = self.density.cdf(tape, tape.scale_shift(zt, 1.0, 0.5))
        dn = self.density.cdf(tape, tape.scale_shift(zt, 1.0, -0.5))
        p = tape.clip_min(tape.sub(up, dn), PROB_FLOOR)
        return tape.scale_shift(tape.sum(tape.log(p)), -_INV_LN2, 0.0)

    # -- losses ------------------------------------------------------------

    def compression_loss(self, tape, x, mode, rng=None):
        """Rate-distortion objective; returns tensors for both task terms.

        loss = mean-per-image rate (bits) + lam * n_values * DIST_PEAK^2 * MSE.
        """
        c = self.config
        n, h, w, ch = x.shape
        y = self.encode(tape, x)
        z = self.hyper_encode(tape, y)
        z_tilde = self.quantize(tape, z, mode, rng)
        gmm = self.hyper_decode(tape, z_tilde)
        y_tilde = self.quantize(tape, y, mode, rng)
        x_hat = self.decode(tape, y_tilde)
        rate_y = self.latent_rate(tape, y_tilde, gmm)
        rate_z = self.hyper_rate(tape, z_tilde)
        rate = tape.scale_shift(tape.add(rate_y, rate_z), 1.0 / n, 0.0)
        mse = tape.mean(tape.square(tape.sub(x, x_hat)))
        lam_eff = c.lam * h * w * ch * DIST_PEAK**2
        weighted_dist = tape.scale_shift(mse, lam_eff, 0.0)
        loss = tape.add(rate, weighted_dist)
        return {
            "loss": loss,
            "rate_task": rate,
            "dist_task": weighted_dist,
            "rate_bits": float(rate.data),
            "bpp": float(rate.data) / (h * w),
            "mse": float(mse.data),
            "psnr": psnr_from_mse(float(mse.data)),
            "latent": y,
            "reconstruction": x_hat,
        }


# -- plain-number helpers --------------------------------------------------


def distortion(x, x_hat):
    """Mean squared error over all pixels."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"distortion: shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def psnr_from_mse(mse, peak=1.0):
    if mse <= 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr(x, x_hat, peak=1.0):
    """10 log10(peak^2 / MSE); +inf when the images are identical."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    return psnr_from_mse(distortion(x, x_hat), peak)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def pad_to_multiple(image, factor):
    """Reflect-pad H and W up to a multiple of factor; returns (padded, orig_hw)."""
    h, w = image.shape[0], image.shape[1]
    ph = (-h) % factor
    pw = (-w) % factor
    if ph == 0 and pw == 0:
        return image, (h, w)
    padded = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return padded, (h, w)


def crop_to(image, hw):
    return image[: hw[0], : hw[1], :]


def gmm_interval_probs(weights, means, scales, lo, hi):
    """Integer-interval probabilities under a Gaussian mixture.

    weights/means/scales: (m, K) arrays. Returns (probs (m, hi-lo+1),
    escape_mass (m,)) where escape mass is the tail weight outside the window.
    """
    edges = np.arange(lo, hi + 2, dtype=np.float64) - 0.5
    z = (edges[None, None, :] - means[:, :, None]) / scales[:, :, None]
    cdf = 0.5 * _erfc(-z * _INV_SQRT2)
    probs = ((cdf[:, :, 1:] - cdf[:, :, :-1]) * weights[:, :, None]).sum(axis=1)
    tail = (weights * (cdf[:, :, 0] + 1.0 - cdf[:, :, -1])).sum(axis=1)
    return probs, np.maximum(tail, 0.0)


def factorized_interval_probs(density, lo, hi):
    """Per-channel interval probabilities under the factorized density."""
    edges = np.arange(lo, hi + 2, dtype=np.float64) - 0.5
    grid = np.broadcast_to(edges, (density.channels, edges.size))
    cdf = density.cdf_numpy(grid)
    probs = cdf[:, 1:] - cdf[:, :-1]
    tail = cdf[:, 0] + 1.0 - cdf[:, -1]
    return np.maximum(probs, 0.0), np.maximum(tail, 0.0)


def uniform_quantization_rd(images, deltas):
    """Rate-distortion of fixed-grid uniform quantization of raw pixels.

    Rate is the empirical Shannon entropy of the quantized symbols (ideal
    code length); bpp is per spatial pixel. Returns [(bpp, psnr)] sorted by bpp.
    """
    x = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    n, h, w, c = x.shape
    points = []
    for delta in deltas:
        q = round_half_away(x / delta)
        recon = np.clip(q * delta, 0.0, 1.0)
        mse = distortion(x, recon)
        _, counts = np.unique(q, return_counts=True)
        p = counts / q.size
        entropy = float(-(p * np.log2(p)).sum())
        bpp = entropy * q.size / (n * h * w)
        points.append((bpp, psnr_from_mse(mse)))
    return sorted(points)
