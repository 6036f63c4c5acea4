"""Sequential simulator of pipeline-parallel optimization with
communication compression.

All workers run in one process in deterministic order: forward sweep
1..E-1 across the boundaries, then a backward sweep E..1 that updates
each worker's parameters before handing the activation gradient to its
neighbor. The backward pass at a worker uses the weights that produced
the forward pass, matching a synchronous pipeline where the gradient
message is formed from the same iterate it was computed against.

Both endpoints of a boundary keep a copy of the reconstruction cache and
apply the identical update, so sender and receiver copies stay
bit-identical; this is asserted after every exchange.

Variants:

  no_comp      dense activations and gradients, fresh sample every step
  direct       compress values directly in both directions
  forward_ef   error feedback on activations, direct compression on
               gradients, no lazy sampling
  aq_sgd       per-sample forward error feedback (one cache entry per
               dataset row per boundary), direct backward compression
  clapping_fc  error feedback both ways with lazy sampling, every
               message compressed
  clapping_fu  like fc, but the step that draws a fresh sample sends
               dense payloads in both directions
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import compressors as comp
from . import stages as st
from . import wire
from .errors import ConfigurationError, ContractViolation, UnsupportedConfiguration
from .optim import MOMENTUM_SGD, OptimizerConfig, adam_update, momentum_update
from .rng import named_stream
from .sampling import SINGLE, SamplerState, Schedule, lazy_sample

NO_COMP = "no_comp"
DIRECT = "direct"
FORWARD_EF = "forward_ef"
AQ_SGD = "aq_sgd"
CLAPPING_FC = "clapping_fc"
CLAPPING_FU = "clapping_fu"

VARIANTS = (NO_COMP, DIRECT, FORWARD_EF, AQ_SGD, CLAPPING_FC, CLAPPING_FU)
LAZY_VARIANTS = (CLAPPING_FC, CLAPPING_FU)


@dataclass(frozen=True)
class StreamingInputs:
    """Infinite input stream: draw(rng, size) -> (size, dim) rows."""

    dim: int
    draw: object


@dataclass(frozen=True)
class AlgoConfig:
    variant: str
    optimizer: OptimizerConfig
    forward_compressors: tuple[comp.CompressorSpec, ...]
    backward_compressors: tuple[comp.CompressorSpec, ...]
    batch_size: int = 1
    total_steps: int = 1
    seed: int = 0
    sampler_rule: str = SINGLE
    p_schedule: Schedule = Schedule.constant(1.0)
    momentum_reset_steps: frozenset = frozenset()
    force_fresh_at_step_2: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ConfigurationError("batch_size must be >= 1 and total_steps >= 0")
        if self.batch_size > 1 and self.sampler_rule == SINGLE:
            raise ConfigurationError("batch_size > 1 needs a batch sampler rule")


@dataclass
class IterationMetrics:
    step: int
    f_fu: bool
    refreshed: int
    loss: float
    u_norm: float
    fwd_bytes: int
    bwd_bytes: int
    sim_seconds: float
    cache_entries: int = 0


class PipelineEngine:
    """One simulated run. Instances are single-threaded and hold all
    worker state; two engines with the same config and seed produce
    bit-identical trajectories."""

    def __init__(
        self,
        chain: st.ModelChain,
        config: AlgoConfig,
        inputs,
        init_weights: list[np.ndarray] | None = None,
        bandwidth_bps: float = 100e6,
        latency_s: float = 0.0,
        freeze_weights: bool = False,
    ):
        if chain.num_workers < 2:
            raise ConfigurationError("pipeline needs at least 2 workers")
        n_bound = chain.num_workers - 1
        if len(config.forward_compressors) != n_bound or len(config.backward_compressors) != n_bound:
            raise ConfigurationError(f"need one compressor per direction per {n_bound} boundaries")
        self.chain = chain
        self.config = config
        self.freeze_weights = freeze_weights
        self.E = chain.num_workers
        self.B = config.batch_size

        if isinstance(inputs, StreamingInputs):
            if config.variant == AQ_SGD:
                raise UnsupportedConfiguration(
                    "the per-sample cache cannot cover an infinite input stream"
                )
            if inputs.dim != chain.input_dim:
                raise ConfigurationError("stream dim does not match the chain input")
            self.inputs = inputs
            n_samples = 0
        else:
            X = np.asarray(inputs, dtype=np.float64)
            if X.ndim != 2 or X.shape[1] != chain.input_dim:
                raise ConfigurationError("inputs must be (n, input_dim)")
            if X.shape[0] == 0:
                raise ConfigurationError("empty dataset")
            self.inputs = X
            n_samples = X.shape[0]

        lazy = config.variant in LAZY_VARIANTS
        self.sampler = SamplerState(
            rule=config.sampler_rule,
            batch_size=config.batch_size,
            p_schedule=config.p_schedule if lazy else Schedule.constant(1.0),
            n_samples=n_samples,
            force_fresh_at_step_2=lazy and config.force_fresh_at_step_2,
        )
        self._rng_sample = named_stream(config.seed, "sampler")
        self._rng_stream_data = named_stream(config.seed, "stream-data")

        def comp_stream(direction: str, i: int, spec: comp.CompressorSpec):
            name = f"compressor/{direction}/{i}"
            if spec.seed_stream:
                name += f"/{spec.seed_stream}"
            return named_stream(config.seed, name)

        self._rng_fwd = [comp_stream("fwd", i, s) for i, s in enumerate(config.forward_compressors)]
        self._rng_bwd = [comp_stream("bwd", i, s) for i, s in enumerate(config.backward_compressors)]

        self.weights: list[np.ndarray] = []
        for e in range(1, self.E + 1):
            d = chain.worker_param_dim(e)
            if init_weights is not None:
                w = np.asarray(init_weights[e - 1], dtype=np.float64).copy()
                if w.shape != (d,):
                    raise ConfigurationError(f"worker {e} expects {d} parameters")
            else:
                w = np.zeros(d)
            self.weights.append(w)
        self.momentum = [np.zeros_like(w) for w in self.weights]
        self.second_moment = [np.zeros_like(w) for w in self.weights]

        B = self.B
        self.fwd_cache_send = [np.zeros((B, chain.boundary_dim(i))) for i in range(n_bound)]
        self.fwd_cache_recv = [np.zeros((B, chain.boundary_dim(i))) for i in range(n_bound)]
        self.bwd_cache_send = [np.zeros((B, chain.boundary_dim(i))) for i in range(n_bound)]
        self.bwd_cache_recv = [np.zeros((B, chain.boundary_dim(i))) for i in range(n_bound)]

        self.aqsgd_cache: list[np.ndarray] | None = None
        if config.variant == AQ_SGD:
            self.aqsgd_cache = [
                np.zeros((n_samples, chain.boundary_dim(i))) for i in range(n_bound)
            ]

        self.ledger = wire.TransferLedger(bandwidth_bps=bandwidth_bps, latency_s=latency_s)
        self.t = 0

    # -- state helpers -------------------------------------------------

    def flat_weights(self) -> np.ndarray:
        return np.concatenate(self.weights)

    def per_stage_weights(self) -> list[np.ndarray]:
        out = []
        for e in range(1, self.E + 1):
            out.extend(self.chain.split_params(self.chain.worker_stages(e), self.weights[e - 1]))
        return out

    def aqsgd_cache_entries(self) -> list[int]:
        if self.aqsgd_cache is None:
            return []
        return [c.shape[0] for c in self.aqsgd_cache]

    def batch_cache_entries(self) -> list[int]:
        return [c.shape[0] for c in self.fwd_cache_send]

    def _rows(self, indices: np.ndarray) -> np.ndarray:
        if isinstance(self.inputs, StreamingInputs):
            return np.asarray(self.inputs.draw(self._rng_stream_data, len(indices)), dtype=np.float64)
        return self.inputs[indices]

    def _assert_mirrored(self, i: int) -> None:
        if not (
            np.array_equal(self.fwd_cache_send[i], self.fwd_cache_recv[i])
            and np.array_equal(self.bwd_cache_send[i], self.bwd_cache_recv[i])
        ):
            raise ContractViolation(f"cache mirror broke at boundary {i}")

    # -- worker-local math ---------------------------------------------

    def _worker_forward(self, e: int, y_in: np.ndarray):
        """Forward through worker e's stages; returns (output, tape of
        per-stage inputs)."""
        stages = self.chain.worker_stages(e)
        params = self.chain.split_params(stages, self.weights[e - 1])
        tape = []
        y = y_in
        for stage, w in zip(stages, params):
            tape.append(y)
            y = st.stage_forward(stage, y, w)
        return y, tape

    def _worker_backward(self, e: int, tape: list[np.ndarray], v_out: np.ndarray):
        """Backward through worker e; returns (weight grad averaged over
        the batch, input activation gradient rows)."""
        stages = self.chain.worker_stages(e)
        params = self.chain.split_params(stages, self.weights[e - 1])
        v = v_out
        grads = [np.zeros(0)] * len(stages)
        for idx in reversed(range(len(stages))):
            grads[idx] = st.stage_backward_weight(stages[idx], tape[idx], params[idx], v)
            v = st.stage_backward_input(stages[idx], tape[idx], params[idx], v)
        u = np.concatenate(grads) if grads else np.zeros(0)
        return u / self.B, v

    # -- exchanges -------------------------------------------------------

    def _dense_bytes(self, rows: int, dim: int) -> int:
        return 4 * dim * rows

    def forward_exchange(self, i: int, y: np.ndarray, fresh_rows: np.ndarray, t: int,
                         sample_idx: np.ndarray | None = None):
        """Transmit the boundary-i activation; updates both cache copies
        and the ledger, returns the reconstruction the receiver uses."""
        variant = self.config.variant
        spec = self.config.forward_compressors[i]
        rng = self._rng_fwd[i]
        dim = y.shape[1]

        if variant == NO_COMP:
            recon = y.copy()
            nbytes = value_bytes = self._dense_bytes(self.B, dim)
        elif variant == DIRECT:
            recon, nbytes, value_bytes = comp.compress_batch(spec, y, rng)
        elif variant == AQ_SGD:
            cache = self.aqsgd_cache[i][sample_idx]
            delta, nbytes, value_bytes = comp.compress_batch(spec, y - cache, rng)
            recon = cache + delta
            self.aqsgd_cache[i][sample_idx] = recon
        elif variant == CLAPPING_FU and fresh_rows.any():
            recon = np.empty_like(y)
            stale = ~fresh_rows
            recon[fresh_rows] = y[fresh_rows]
            nbytes = value_bytes = self._dense_bytes(int(fresh_rows.sum()), dim)
            if stale.any():
                cache = self.fwd_cache_send[i][stale]
                delta, nb, vb = comp.compress_batch(spec, y[stale] - cache, rng)
                recon[stale] = cache + delta
                nbytes += nb
                value_bytes += vb
        else:  # forward_ef, clapping_fc, clapping_fu stale step
            cache = self.fwd_cache_send[i]
            delta, nbytes, value_bytes = comp.compress_batch(spec, y - cache, rng)
            recon = cache + delta

        self.fwd_cache_send[i] = recon.copy()
        self.fwd_cache_recv[i] = recon.copy()
        self.ledger.record(i, wire.FORWARD, nbytes, value_bytes)
        self._assert_mirrored(i)
        return recon

    def backward_exchange(self, i: int, v: np.ndarray, fresh_rows: np.ndarray, t: int):
        """Transmit the boundary-i activation gradient back to worker
        i+1; mirrors forward_exchange's cache and ledger behavior."""
        variant = self.config.variant
        spec = self.config.backward_compressors[i]
        rng = self._rng_bwd[i]
        dim = v.shape[1]

        if variant == NO_COMP:
            recon = v.copy()
            nbytes = value_bytes = self._dense_bytes(self.B, dim)
        elif variant in (DIRECT, FORWARD_EF, AQ_SGD):
            recon, nbytes, value_bytes = comp.compress_batch(spec, v, rng)
        elif variant == CLAPPING_FU and fresh_rows.any():
            recon = np.empty_like(v)
            stale = ~fresh_rows
            recon[fresh_rows] = v[fresh_rows]
            nbytes = value_bytes = self._dense_bytes(int(fresh_rows.sum()), dim)
            if stale.any():
                cache = self.bwd_cache_send[i][stale]
                delta, nb, vb = comp.compress_batch(spec, v[stale] - cache, rng)
                recon[stale] = cache + delta
                nbytes += nb
                value_bytes += vb
        else:  # clapping_fc, clapping_fu stale step
            cache = self.bwd_cache_send[i]
            delta, nbytes, value_bytes = comp.compress_batch(spec, v - cache, rng)
            recon = cache + delta

        self.bwd_cache_send[i] = recon.copy()
        self.bwd_cache_recv[i] = recon.copy()
        self.ledger.record(i, wire.BACKWARD, nbytes, value_bytes)
        self._assert_mirrored(i)
        return recon

    # -- one iteration ---------------------------------------------------

    def run_iteration(self, t: int | None = None) -> IterationMetrics:
        """Advance one step: lazy sample, forward sweep, backward sweep
        with interleaved updates. Returns per-step metrics."""
        expected = self.t + 1
        if t is not None and t != expected:
            raise ContractViolation(f"iterations must run in order, expected t={expected}")
        t = expected

        indices, refreshed, f_fu = lazy_sample(self.sampler, self._rng_sample)
        if self.config.variant == AQ_SGD:
            return self.aqsgd_step(indices, t)
        return self._step_body(indices, refreshed, f_fu, t)

    def aqsgd_step(self, sample_indices: np.ndarray, t: int) -> IterationMetrics:
        """One step using the per-sample forward cache for the given
        dataset rows; all other cache entries stay untouched."""
        if self.aqsgd_cache is None:
            raise UnsupportedConfiguration("engine was not configured for the per-sample variant")
        sample_indices = np.asarray(sample_indices, dtype=np.int64)
        if sample_indices.shape != (self.B,):
            raise ContractViolation(f"need {self.B} sample indices")
        fresh = np.ones(self.B, dtype=bool)
        return self._step_body(sample_indices, fresh, True, t)

    def _step_body(self, indices, refreshed, f_fu, t) -> IterationMetrics:
        fwd0 = self.ledger.total_bytes(wire.FORWARD)
        bwd0 = self.ledger.total_bytes(wire.BACKWARD)

        x = self._rows(indices)
        tapes: list = [None] * self.E
        y = x
        for e in range(1, self.E):
            out, tapes[e - 1] = self._worker_forward(e, y)
            y = self.forward_exchange(e - 1, out, refreshed, t, sample_idx=indices)
        y_last, tapes[self.E - 1] = self._worker_forward(self.E, y)
        loss = float(np.mean(y_last))

        gamma = self.config.optimizer.gamma.value_at(t)
        m_t = self.config.optimizer.momentum.value_at(t)
        if t in self.config.momentum_reset_steps:
            for u in self.momentum:
                u[:] = 0.0

        v = np.ones((self.B, 1))
        u_sq = 0.0
        for e in range(self.E, 0, -1):
            u_e, v_in = self._worker_backward(e, tapes[e - 1], v)
            self._update_worker(e, u_e, gamma, m_t)
            u_sq += float(self.momentum[e - 1] @ self.momentum[e - 1])
            if e > 1:
                v = self.backward_exchange(e - 2, v_in, refreshed, t)

        self.t = t
        return IterationMetrics(
            step=t,
            f_fu=bool(f_fu),
            refreshed=int(np.sum(refreshed)),
            loss=loss,
            u_norm=float(np.sqrt(u_sq)),
            fwd_bytes=self.ledger.total_bytes(wire.FORWARD) - fwd0,
            bwd_bytes=self.ledger.total_bytes(wire.BACKWARD) - bwd0,
            sim_seconds=self.ledger.simulated_seconds,
            cache_entries=self.aqsgd_cache[0].shape[0] if self.aqsgd_cache else 0,
        )

    def _update_worker(self, e: int, grad: np.ndarray, gamma: float, m_t: float) -> None:
        if self.freeze_weights:
            return
        opt = self.config.optimizer
        i = e - 1
        if len(grad) == 0:
            return
        if opt.kind == MOMENTUM_SGD:
            self.momentum[i], self.weights[i] = momentum_update(
                self.momentum[i], self.weights[i], grad, m_t, gamma
            )
        else:
            self.momentum[i], self.second_moment[i], self.weights[i] = adam_update(
                self.momentum[i], self.second_moment[i], self.weights[i], grad,
                m_t, opt.beta2, opt.eps, gamma,
            )

    def run(self, steps: int | None = None) -> list[IterationMetrics]:
        steps = self.config.total_steps if steps is None else steps
        return [self.run_iteration() for _ in range(steps)]
