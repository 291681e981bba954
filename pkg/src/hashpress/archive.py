"""Compressed archive: per-image entropy-coded streams plus packed hash codes.

The hyper stream is coded first under the (static) factorized density; the
latent stream follows under mixture models derived from the decoded hyper
latent, so the decoder can rebuild bit-exact models from side information
alone. Container layout: magic, version, code length, image count, then per
image the id, packed code, hyper bitstream, latent bitstream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import coder, counters
from .autodiff import Tape, constant
from .codec import factorized_interval_probs, gmm_interval_probs, round_half_away

SUPPORT_LO = -127
SUPPORT_HI = 127

_AR_MAGIC = b"JCAR"
_AR_VERSION = 1


class FormatError(ValueError):
    pass


@dataclass
class ArchiveEntry:
    image_id: int
    code: bytes
    hyper_stream: bytes
    latent_stream: bytes


@dataclass
class Archive:
    q: int
    entries: dict  # id -> ArchiveEntry


@dataclass
class CompressStats:
    image_id: int
    est_bits: float
    payload_bits: int
    bpp: float


def _window_probs_floor(probs, lo, hi, symbols):
    """Model probability of each symbol, floored like the rate estimate."""
    idx = np.clip(symbols - lo, 0, hi - lo)
    inside = (symbols >= lo) & (symbols <= hi)
    p = np.where(inside, probs[np.arange(len(symbols)), idx], 0.0)
    return np.maximum(p, 2.0**-32)


class ArchiveCodec:
    """Stateless helper binding a codec model (and optional hash head) to the
    entropy-coding layer."""

    def __init__(self, model, head=None):
        self.model = model
        self.head = head
        probs, esc = factorized_interval_probs(model.density, SUPPORT_LO, SUPPORT_HI)
        self._hyper_models = coder.models_from_prob_matrix(probs, SUPPORT_LO, SUPPORT_HI, esc)
        self._hyper_probs = probs

    # -- encoding ---------------------------------------------------------

    def analyze(self, images):
        """Encoder-side pass over a batch: latents, rounded tensors, codes."""
        x = constant(np.asarray(images, dtype=np.float64))
        tape = Tape()
        y = self.model.encode(tape, x)
        z = self.model.hyper_encode(tape, y)
        codes = None
        if self.head is not None:
            _, code_t, _ = self.head.forward(tape, y)
            codes = code_t.data
        return y.data, round_half_away(y.data), round_half_away(z.data), codes

    def hash_codes(self, images):
        """Codes straight from the encoder; never touches any bitstream."""
        if self.head is None:
            raise ValueError("no hash head loaded")
        _, _, _, codes = self.analyze(images)
        return codes

    def _hyper_model_seq(self, shape):
        c = shape[-1]
        n_elem = int(np.prod(shape))
        return [self._hyper_models[i % c] for i in range(n_elem)]

    def _latent_models(self, z_tilde):
        w, m, s = self.model.mixture_params_numpy(z_tilde)
        probs, esc = gmm_interval_probs(w, m, s, SUPPORT_LO, SUPPORT_HI)
        return coder.models_from_prob_matrix(probs, SUPPORT_LO, SUPPORT_HI, esc), probs

    def compress_one(self, image_id, y_tilde, z_tilde, code):
        """Entropy-code one image's rounded tensors into an ArchiveEntry."""
        z_syms = z_tilde.astype(np.int64).ravel()
        hyper_models = self._hyper_model_seq(z_tilde.shape)
        hyper_payload = coder.arith_encode(z_syms, hyper_models)
        hyper_stream = coder.pack_bitstream(coder.STREAM_HYPER, z_tilde.shape,
                                            SUPPORT_LO, SUPPORT_HI, hyper_payload)

        latent_models, latent_probs = self._latent_models(z_tilde)
        y_syms = y_tilde.astype(np.int64).ravel()
        latent_payload = coder.arith_encode(y_syms, latent_models)
        latent_stream = coder.pack_bitstream(coder.STREAM_LATENT, y_tilde.shape,
                                             SUPPORT_LO, SUPPORT_HI, latent_payload)

        est = -np.log2(_window_probs_floor(latent_probs, SUPPORT_LO, SUPPORT_HI, y_syms)).sum()
        hyper_p = np.vstack([self._hyper_probs[i % z_tilde.shape[-1]] for i in range(z_syms.size)])
        est += -np.log2(_window_probs_floor(hyper_p, SUPPORT_LO, SUPPORT_HI, z_syms)).sum()

        packed = b""
        if code is not None:
            from .retrieval import pack_code

            packed = pack_code(code)
        entry = ArchiveEntry(image_id, packed, hyper_stream, latent_stream)
        payload_bits = 8 * (len(hyper_payload) + len(latent_payload))
        return entry, float(est), payload_bits

    def compress_batch(self, images, ids, batch=32):
        """Compress a stack of images; returns (entries, stats)."""
        entries = []
        stats = []
        n, h, w, _ = np.asarray(images).shape
        for start in range(0, n, batch):
            chunk = images[start:start + batch]
            chunk_ids = ids[start:start + batch]
            _, y_tilde, z_tilde, codes = self.analyze(chunk)
            for i, image_id in enumerate(chunk_ids):
                code = codes[i] if codes is not None else None
                entry, est, bits = self.compress_one(image_id, y_tilde[i:i + 1], z_tilde[i:i + 1], code)
                entries.append(entry)
                stats.append(CompressStats(image_id, est, bits, bits / (h * w)))
        return entries, stats

    # -- decoding -----------------------------------------------------------

    def decompress(self, entry):
        """Full decode of one entry: entropy-decode both streams, then run the
        neural decoder. Increments the decode counters."""
        counters.IMAGES_DECODED += 1
        kind, z_shape, lo, hi, hyper_payload, _ = coder.unpack_bitstream(entry.hyper_stream)
        if kind != coder.STREAM_HYPER:
            raise FormatError("expected hyper stream first")
        z_syms = coder.arith_decode(hyper_payload, self._hyper_model_seq(z_shape))
        z_tilde = np.array(z_syms, dtype=np.float64).reshape(z_shape)

        kind, y_shape, lo, hi, latent_payload, _ = coder.unpack_bitstream(entry.latent_stream)
        if kind != coder.STREAM_LATENT:
            raise FormatError("expected latent stream")
        latent_models, _ = self._latent_models(z_tilde)
        y_syms = coder.arith_decode(latent_payload, latent_models)
        y_tilde = np.array(y_syms, dtype=np.float64).reshape(y_shape)

        tape = Tape()
        x_hat = self.model.decode(tape, constant(y_tilde))
        return x_hat.data[0]


# -- container ----------------------------------------------------------------


def write_archive(path, q, entries):
    entries = sorted(entries, key=lambda e: e.image_id)
    with open(path, "wb") as fh:
        fh.write(_AR_MAGIC)
        fh.write(struct.pack("<BHQ", _AR_VERSION, q, len(entries)))
        for e in entries:
            fh.write(struct.pack("<QI", e.image_id, len(e.code)))
            fh.write(e.code)
            fh.write(e.hyper_stream)
            fh.write(e.latent_stream)
    return path


def read_archive(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _AR_MAGIC:
        raise FormatError(f"bad archive magic {buf[:4]!r}")
    version, q, count = struct.unpack_from("<BHQ", buf, 4)
    if version != _AR_VERSION:
        raise FormatError(f"unsupported archive version {version}")
    pos = 4 + 11
    entries = {}
    for _ in range(count):
        image_id, code_len = struct.unpack_from("<QI", buf, pos)
        pos += 12
        code = bytes(buf[pos:pos + code_len])
        pos += code_len
        try:
            _, _, _, _, _, end = coder.unpack_bitstream(buf, pos)
            hyper_stream = bytes(buf[pos:end])
            pos = end
            _, _, _, _, _, end = coder.unpack_bitstream(buf, pos)
            latent_stream = bytes(buf[pos:end])
            pos = end
        except coder.FormatError as e:
            raise FormatError(f"archive entry {image_id}: {e}") from None
        entries[image_id] = ArchiveEntry(image_id, code, hyper_stream, latent_stream)
    return Archive(q=q, entries=entries)
