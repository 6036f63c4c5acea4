"""Contractive compressors with exact wire-payload accounting.

Each compressor maps a vector x to a reconstruction C(x) the receiving
worker decodes, together with the exact byte size of the message that
would carry it. Deterministic kinds ignore the rng handle and are pure.

Kinds and their documented contraction factors (omega^2 bounds the worst
case of E||x - C(x)||^2 / ||x||^2):

  identity        omega^2 = 0
  topk            keeps the k largest magnitudes, ties broken by
                  ascending index; omega^2 = 1 - k/d, attained when all
                  magnitudes are equal
  randk           keeps k uniformly chosen coordinates; omega^2 = 1 - k/d
                  in expectation
  uniform_quant   per-call symmetric scaling by max|x_i|, 2^bits - 1
                  levels of width 2*scale/(2^bits - 1), deterministic
                  round half away from zero, scale sent as one float32;
                  omega^2 = d / ((2^bits - 1)^2 + d - 1), attained by
                  (scale, step/2, ..., step/2)
  natural         magnitude rounded to the nearest power of two (ties to
                  the larger), sign preserved, zero to zero; exponents
                  are clamped to the wire range [-63, 63] (smaller
                  magnitudes flush to zero, larger saturate);
                  omega^2 = 1/9 within that range
  compose         members applied left to right; the bound folds as
                  omega <- omega_i + omega_acc * (1 + omega_i), a
                  configuration error if it reaches 1
  inject_uniform  pseudo-compressor for noise-injection studies:
                  C(x) = x * (1 + U(-a, a)) elementwise, so the injected
                  error scales with whatever quantity is compressed; it
                  carries dense payloads and is excluded from
                  contraction certification
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import wire
from .errors import ConfigurationError, ContractViolation

IDENTITY = "identity"
TOPK = "topk"
RANDK = "randk"
UNIFORM_QUANT = "uniform_quant"
NATURAL = "natural"
COMPOSE = "compose"
INJECT_UNIFORM = "inject_uniform"

KINDS = (IDENTITY, TOPK, RANDK, UNIFORM_QUANT, NATURAL, COMPOSE, INJECT_UNIFORM)
STOCHASTIC_KINDS = (RANDK, INJECT_UNIFORM)

NATURAL_EXP_MIN = -63
NATURAL_EXP_MAX = 63


@dataclass(frozen=True)
class CompressorSpec:
    kind: str
    k: int = 0
    bits: int = 0
    amplitude: float = 0.0
    inner: tuple = ()
    seed_stream: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown compressor kind {self.kind!r}")
        if self.kind in (TOPK, RANDK) and self.k < 1:
            raise ConfigurationError(f"{self.kind} needs k >= 1")
        if self.kind == UNIFORM_QUANT and not 2 <= self.bits <= 16:
            raise ConfigurationError("uniform_quant bits must be in [2, 16]")
        if self.kind == COMPOSE:
            if not self.inner:
                raise ConfigurationError("compose needs at least one member")
            if any(m.kind == COMPOSE for m in self.inner):
                raise ConfigurationError("compose members must not nest")
        if self.kind == INJECT_UNIFORM and self.amplitude <= 0:
            raise ConfigurationError("inject_uniform needs a positive amplitude")

    @property
    def stochastic(self) -> bool:
        if self.kind == COMPOSE:
            return any(m.stochastic for m in self.inner)
        return self.kind in STOCHASTIC_KINDS


@dataclass(frozen=True)
class CompressedPayload:
    reconstruction: np.ndarray
    encoded_bytes: int
    value_bytes: int
    body: wire.WireBody


def identity_spec() -> CompressorSpec:
    return CompressorSpec(IDENTITY)


def topk_spec(k: int) -> CompressorSpec:
    return CompressorSpec(TOPK, k=k)


def randk_spec(k: int) -> CompressorSpec:
    return CompressorSpec(RANDK, k=k)


def quant_spec(bits: int) -> CompressorSpec:
    return CompressorSpec(UNIFORM_QUANT, bits=bits)


def natural_spec() -> CompressorSpec:
    return CompressorSpec(NATURAL)


def compose_spec(*members: CompressorSpec) -> CompressorSpec:
    return CompressorSpec(COMPOSE, inner=tuple(members))


def inject_uniform_spec(amplitude: float) -> CompressorSpec:
    return CompressorSpec(INJECT_UNIFORM, amplitude=amplitude)


def _check_input(spec: CompressorSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ContractViolation("compressor input must be finite")
    if spec.kind in (TOPK, RANDK) and spec.k > x.shape[-1]:
        raise ConfigurationError(f"k={spec.k} exceeds input dimension {x.shape[-1]}")
    if spec.kind == COMPOSE:
        for m in spec.inner:
            _check_input(m, x)
    return x


def _topk_rows(x: np.ndarray, k: int) -> np.ndarray:
    """Row mask of the k largest magnitudes, ties to the lower index."""
    order = np.argsort(-np.abs(x), axis=-1, kind="stable")
    mask = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return mask


def _quant_rows(x: np.ndarray, bits: int):
    """Returns (reconstruction, float32 scales, integer codes)."""
    levels_half = (1 << (bits - 1)) - 1
    scale32 = np.abs(x).max(axis=-1, keepdims=True).astype(np.float32)
    step = 2.0 * scale32.astype(np.float64) / (2**bits - 1)
    safe = np.where(step > 0, step, 1.0)
    codes = np.sign(x) * np.floor(np.abs(x) / safe + 0.5)
    codes = np.clip(codes, -levels_half, levels_half)
    recon = codes * step
    return recon, scale32, codes.astype(np.int64)


def _natural_rows(x: np.ndarray):
    """Returns (reconstruction, exponent array with sentinel for zero)."""
    mant, exp = np.frexp(np.abs(x))  # |x| = mant * 2^exp, mant in [0.5, 1)
    exp = exp - 1                    # |x| = (2*mant) * 2^exp, 2*mant in [1, 2)
    exp = np.where(2.0 * mant >= 1.5, exp + 1, exp)
    zero = x == 0.0
    flushed = exp < NATURAL_EXP_MIN
    exp = np.clip(exp, NATURAL_EXP_MIN, NATURAL_EXP_MAX)
    recon = np.sign(x) * np.ldexp(1.0, exp)
    recon[zero | flushed] = 0.0
    exp_out = np.where(zero | flushed, np.iinfo(np.int64).min, exp)
    return recon, exp_out


def _natural_codes(x_sign: np.ndarray, exp: np.ndarray) -> np.ndarray:
    codes = np.zeros(exp.shape, dtype=np.uint8)
    live = exp != np.iinfo(np.int64).min
    codes[live] = (exp[live] + 64).astype(np.uint8)
    codes[live & (x_sign < 0)] |= 0x80
    return codes


def _reconstruct(spec: CompressorSpec, x: np.ndarray, rng) -> np.ndarray:
    """Row-wise reconstruction for a (..., d) array."""
    if spec.kind == IDENTITY:
        return x.copy()
    if spec.kind == TOPK:
        return np.where(_topk_rows(x, spec.k), x, 0.0)
    if spec.kind == RANDK:
        if rng is None:
            raise ContractViolation("randk needs a random stream")
        shape = x.shape if x.ndim == 2 else (1,) + x.shape
        keys = rng.random(shape)
        order = np.argsort(keys, axis=-1)
        mask = np.zeros(shape, dtype=bool)
        np.put_along_axis(mask, order[..., : spec.k], True, axis=-1)
        return np.where(mask.reshape(x.shape), x, 0.0)
    if spec.kind == UNIFORM_QUANT:
        return _quant_rows(x, spec.bits)[0]
    if spec.kind == NATURAL:
        return _natural_rows(x)[0]
    if spec.kind == INJECT_UNIFORM:
        if rng is None:
            raise ContractViolation("inject_uniform needs a random stream")
        noise = rng.uniform(-spec.amplitude, spec.amplitude, size=x.shape)
        return x * (1.0 + noise)
    return _compose_chain(spec, x, rng)[-1]


def _compose_chain(spec: CompressorSpec, x: np.ndarray, rng) -> list[np.ndarray]:
    """Intermediates [x, z_1, ..., z_n] of a composed application."""
    chain = [x]
    for member in spec.inner:
        chain.append(_reconstruct(member, chain[-1], rng))
    return chain


def _wire_body(
    spec: CompressorSpec, x: np.ndarray, recon: np.ndarray, prelast: np.ndarray | None = None
) -> wire.WireBody:
    """WireBody for a single compressed vector (1-D only)."""
    d = x.shape[0]
    if spec.kind in (IDENTITY, INJECT_UNIFORM):
        return wire.WireBody(fmt=wire.FMT_DENSE, dim=d, values=recon)
    if spec.kind in (TOPK, RANDK):
        # the sparse body always carries exactly k entries; selected
        # entries that happen to be zero-valued still occupy a slot
        if spec.kind == TOPK:
            idx = np.flatnonzero(_topk_rows(x, spec.k))
        else:
            idx = np.flatnonzero(recon != 0.0)
            if len(idx) < spec.k:
                pad = np.setdiff1d(np.arange(d), idx)[: spec.k - len(idx)]
                idx = np.sort(np.concatenate([idx, pad]))
        return wire.WireBody(fmt=wire.FMT_SPARSE, dim=d, indices=idx, values=recon[idx])
    if spec.kind == UNIFORM_QUANT:
        _, scale32, codes = _quant_rows(x, spec.bits)
        return wire.WireBody(
            fmt=wire.FMT_QUANT, dim=d, scale=float(scale32.reshape(())), codes=codes,
            bits=spec.bits,
        )
    if spec.kind == NATURAL:
        _, exp = _natural_rows(x)
        return wire.WireBody(fmt=wire.FMT_NATURAL, dim=d, codes=_natural_codes(np.sign(x), exp))
    # compose: indices of the surviving support + the last member's value
    # block, built from the intermediate the last member actually saw so
    # that decoding reproduces the reconstruction exactly
    idx = np.flatnonzero(recon != 0.0)
    last = spec.inner[-1]
    sub = prelast[idx] if prelast is not None else recon[idx]
    if last.kind == UNIFORM_QUANT:
        _, scale32, codes = _quant_rows(sub if len(sub) else np.zeros(1), last.bits)
        inner = wire.WireBody(fmt=wire.FMT_QUANT, dim=len(idx),
                              scale=float(np.asarray(scale32).reshape(-1)[0]),
                              codes=codes[: len(idx)], bits=last.bits)
    elif last.kind == NATURAL:
        _, exp = _natural_rows(sub)
        inner = wire.WireBody(fmt=wire.FMT_NATURAL, dim=len(idx),
                              codes=_natural_codes(np.sign(sub), exp))
    else:
        inner = wire.WireBody(fmt=wire.FMT_DENSE, dim=len(idx), values=recon[idx])
    return wire.WireBody(fmt=wire.FMT_COMPOSE, dim=d, indices=idx, inner=inner)


def _sparse_payload_sizes(spec: CompressorSpec, x: np.ndarray, recon: np.ndarray):
    """(payload, value-only) byte totals for a batch, without building bodies."""
    rows = recon if recon.ndim == 2 else recon[None, :]
    d = rows.shape[-1]
    n = rows.shape[0]
    if spec.kind in (IDENTITY, INJECT_UNIFORM):
        return 4 * d * n, 4 * d * n
    if spec.kind in (TOPK, RANDK):
        return 8 * spec.k * n, 4 * spec.k * n
    if spec.kind == UNIFORM_QUANT:
        per = 4 + wire.quant_code_bytes(d, spec.bits)
        return per * n, per * n
    if spec.kind == NATURAL:
        return d * n, d * n
    # compose
    nnz = np.count_nonzero(rows, axis=-1)
    last = spec.inner[-1]
    if last.kind == UNIFORM_QUANT:
        values = int(sum(4 + wire.quant_code_bytes(int(c), last.bits) for c in nnz))
    elif last.kind == NATURAL:
        values = int(nnz.sum())
    else:
        values = 4 * int(nnz.sum())
    payload = 4 * n + 4 * int(nnz.sum()) + values
    return payload, values


def compress(spec: CompressorSpec, x: np.ndarray, rng=None) -> CompressedPayload:
    """Compress one vector; returns the reconstruction, exact wire byte
    counts, and the structured body the codec can serialize."""
    x = _check_input(spec, x)
    if x.ndim != 1:
        raise ContractViolation("compress takes a single vector; use compress_batch for rows")
    prelast = None
    if spec.kind == COMPOSE:
        chain = _compose_chain(spec, x, rng)
        recon, prelast = chain[-1], chain[-2]
    else:
        recon = _reconstruct(spec, x, rng)
    body = _wire_body(spec, x, recon, prelast)
    return CompressedPayload(
        reconstruction=recon,
        encoded_bytes=wire.body_size(body),
        value_bytes=wire.value_only_size(body),
        body=body,
    )


def compress_batch(spec: CompressorSpec, x: np.ndarray, rng=None):
    """Row-wise compression of a (B, d) array.

    Deterministic kinds match per-row compress() bit for bit; stochastic
    kinds draw the whole batch from the given stream in one call. Returns
    (reconstruction, payload_bytes, value_bytes) summed over rows.
    """
    x = _check_input(spec, x)
    if x.ndim != 2:
        raise ContractViolation("compress_batch takes a (B, d) array")
    recon = _reconstruct(spec, x, rng)
    payload, values = _sparse_payload_sizes(spec, x, recon)
    return recon, payload, values


def contraction_bound(spec: CompressorSpec, dim: int) -> float:
    """Certified upper bound on sup_x E||x - C(x)||^2 / ||x||^2.

    Raises a configuration error for non-contractive configurations
    (inject_uniform, or a composition whose folded factor reaches 1).
    """
    if dim < 1:
        raise ConfigurationError("dim must be >= 1")
    if spec.kind == IDENTITY:
        return 0.0
    if spec.kind in (TOPK, RANDK):
        if spec.k > dim:
            raise ConfigurationError(f"k={spec.k} exceeds dim {dim}")
        return 1.0 - spec.k / dim
    if spec.kind == UNIFORM_QUANT:
        levels = (1 << spec.bits) - 1
        return dim / (levels**2 + dim - 1)
    if spec.kind == NATURAL:
        return 1.0 / 9.0
    if spec.kind == INJECT_UNIFORM:
        raise ConfigurationError("inject_uniform is not a contractive compressor")
    # compose: ||x - C2(C1(x))|| <= ||C1(x) - C2(C1(x))|| + ||x - C1(x)||
    # folds member by member as omega <- omega_i + omega_acc * (1 + omega_i)
    omega = 0.0
    for member in spec.inner:
        w_i = float(np.sqrt(contraction_bound(member, dim)))
        omega = w_i + omega * (1.0 + w_i)
    if omega >= 1.0:
        raise ConfigurationError(f"composition is not contractive (omega={omega:.3f})")
    return omega**2


def contraction_ratio_samples(
    spec: CompressorSpec, dim: int, trials: int, rng, include_adversarial: bool = True
) -> np.ndarray:
    """Observed ||x - C(x)||^2 / ||x||^2 on Gaussian trial vectors, plus
    the all-equal adversarial vector that attains the top-k bound."""
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    ratios = np.empty(trials + (1 if include_adversarial else 0))
    for i in range(trials):
        x = rng.standard_normal(dim)
        c = compress(spec, x, rng).reconstruction
        ratios[i] = float(np.sum((x - c) ** 2) / np.sum(x**2))
    if include_adversarial:
        x = np.full(dim, 0.5)
        c = compress(spec, x, rng).reconstruction
        ratios[-1] = float(np.sum((x - c) ** 2) / np.sum(x**2))
    return ratios


def empirical_contraction(spec: CompressorSpec, dim: int, trials: int, rng) -> float:
    """Worst observed contraction ratio over random trials plus the
    adversarial uniform vector. For deterministic kinds this must stay
    within 1e-12 of contraction_bound."""
    return float(contraction_ratio_samples(spec, dim, trials, rng).max())
