"""Target policy trained by conditional flow matching.

A context encoder (same pattern as the collector, separate weights) produces
observation tokens; an action-expert stack alternates cross-attention from the
K noisy action tokens onto the context with self-attention over the action
tokens, and the output head predicts the transport field. Inference integrates
the field from Gaussian noise with a fixed-step Euler scheme.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor, save_params
from .collector import (
    ConditioningMemory,
    EnsembleBuffer,
    _cross_attn,
    _ln,
    _ffn,
    batch_features,
    build_chunk_dataset,
    chunk_tensor,
    encode_batch,
    init_encoder_params,
    _init_block,
    _init_ln,
)
from .core.rng import split_rng
from .core.store import DatasetManifest
from .core.types import ACTION_DIM, Action, ActionChunk, EngineConfig, Observation
from .envsim import TaskSpec, WorldState, expert_action, observe, oracle_success, reset, step, state_from_observation


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_target_params(cfg: EngineConfig, seed: int) -> ParamSet:
    rng = split_rng(seed, "target-init")
    params = ParamSet()
    d = cfg.hidden_dim
    init_encoder_params(params, cfg, rng)
    params.add("act_in/w", rng.normal(0.0, 1.0 / np.sqrt(ACTION_DIM), size=(ACTION_DIM, d)))
    params.add("act_in/b", np.zeros(d))
    params.add("pos_embed", rng.normal(0.0, 0.5, size=(cfg.chunk_size, d)))
    for i in range(cfg.expert_blocks):
        _init_block(params, f"xblk{i}", d, cfg.mlp_ratio, rng, self_attn=True)
    _init_ln(params, "out_ln", d)
    params.add("head/w", np.zeros((d, ACTION_DIM)))
    params.add("head/b", np.zeros(ACTION_DIM))
    return params


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def encode_context(params: ParamSet, feats: dict) -> Tensor:
    """Observation + task embedding tokens, (B, 3, d)."""
    return encode_batch(params, feats).memory


def field_tensor(params: ParamSet, noisy_actions: np.ndarray, context: Tensor, cfg: EngineConfig) -> Tensor:
    """Transport field v(noisy chunk, context) -> (B, K, d_a).

    Each expert block runs cross-attention onto the context, then
    self-attention over the K action tokens, then a feedforward.
    """
    b = noisy_actions.shape[0]
    x = ad.linear(ad.constant(noisy_actions), params["act_in/w"], params["act_in/b"])
    x = ad.add(x, ad.expand_rows(params["pos_embed"], b))
    for i in range(cfg.expert_blocks):
        name = f"xblk{i}"
        x = ad.add(x, _cross_attn(params, f"{name}/ca", _ln(params, f"{name}/ln1", x), context))
        h = _ln(params, f"{name}/ln_sa", x)
        x = ad.add(x, _cross_attn(params, f"{name}/sa", h, h))
        x = ad.add(x, _ffn(params, f"{name}/ffn", _ln(params, f"{name}/ln2", x)))
    x = _ln(params, "out_ln", x)
    return ad.linear(x, params["head/w"], params["head/b"])


# ---------------------------------------------------------------------------
# flow matching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowSample:
    sigma: float
    epsilon: np.ndarray  # (K, d_a)
    a_sigma: np.ndarray  # sigma * A + (1 - sigma) * epsilon
    u: np.ndarray  # A - epsilon, independent of sigma


def make_flow_sample(actions: np.ndarray, sigma: float, epsilon: np.ndarray) -> FlowSample:
    if not 0.0 <= sigma <= 1.0:
        raise ValueError("sigma must lie in [0, 1]")
    actions = np.asarray(actions, dtype=np.float64)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    return FlowSample(
        sigma=sigma,
        epsilon=epsilon,
        a_sigma=sigma * actions + (1.0 - sigma) * epsilon,
        u=actions - epsilon,
    )


def cfm_loss_given(
    params: ParamSet,
    batch: dict,
    sigma: np.ndarray,
    epsilon: np.ndarray,
    cfg: EngineConfig,
) -> Tensor:
    """Flow-matching loss with the noise fixed (used directly by gradient checks)."""
    targets = batch["targets"]
    a_sigma = sigma[:, None, None] * targets + (1.0 - sigma[:, None, None]) * epsilon
    u = targets - epsilon
    context = encode_context(params, batch)
    v = field_tensor(params, a_sigma, context, cfg)
    # mean over the batch of the squared field error summed over the chunk
    return ad.scale(ad.mse_loss(v, u), float(targets.shape[1] * targets.shape[2]))


def cfm_loss(params: ParamSet, batch: dict, rng: np.random.Generator, cfg: EngineConfig) -> Tensor:
    b = batch["targets"].shape[0]
    if b == 0:
        raise ValueError("empty batch")
    sigma = rng.uniform(0.0, 1.0, size=b)
    epsilon = rng.standard_normal(batch["targets"].shape)
    return cfm_loss_given(params, batch, sigma, epsilon, cfg)


def integrate_field(
    field: Callable[[np.ndarray], np.ndarray],
    epsilon: np.ndarray,
    flow_steps: int,
) -> np.ndarray:
    """Euler integration of dA/dsigma = field(A) from A = epsilon over [0, 1]."""
    if flow_steps < 1:
        raise ValueError("flow_steps must be >= 1")
    a = np.array(epsilon, dtype=np.float64)
    h = 1.0 / flow_steps
    for _ in range(flow_steps):
        v = np.asarray(field(a), dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("non-finite field output")
        a = a + h * v
    return a


def sample_chunk_batch(
    params: ParamSet,
    feats: dict,
    flow_steps: int,
    rngs: list[np.random.Generator],
    cfg: EngineConfig,
) -> np.ndarray:
    """Draw one chunk per row; each row uses its own noise stream."""
    context = encode_context(params, feats)
    epsilon = np.stack([rng.standard_normal((cfg.chunk_size, ACTION_DIM)) for rng in rngs])

    def field(a: np.ndarray) -> np.ndarray:
        return field_tensor(params, a, context, cfg).values

    return integrate_field(field, epsilon, flow_steps)


def sample_chunk(
    params: ParamSet,
    obs: Observation,
    flow_steps: int,
    rng: np.random.Generator,
    cfg: EngineConfig,
) -> ActionChunk:
    feats = batch_features([obs], cfg.max_objects)
    out = sample_chunk_batch(params, feats, flow_steps, [rng], cfg)
    return ActionChunk(actions=out[0], predicted_at=obs.step_index)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_target(
    params: ParamSet,
    manifest: DatasetManifest,
    cfg: EngineConfig,
    seed: int,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 0,
) -> tuple[ParamSet, list[float]]:
    """Minimize the flow-matching loss with AdamW; deterministic given seed."""
    data = build_chunk_dataset(manifest, cfg)
    n = data["vis"].shape[0]
    rng = split_rng(seed, "cfm-train")
    noise_rng = split_rng(seed, "cfm-noise")
    losses = []
    for step_i in range(cfg.target_steps):
        idx = rng.integers(0, n, size=min(cfg.target_batch, n))
        batch = {
            "vis": data["vis"][idx],
            "state": data["state"][idx],
            "task": data["task"][idx],
            "targets": data["targets"][idx],
        }
        loss = cfm_loss(params, batch, noise_rng, cfg)
        params.zero_grad()
        ad.backward(loss)
        ad.adam_step(params, cfg.target_lr, weight_decay=cfg.weight_decay)
        losses.append(loss.item())
        if checkpoint_dir and checkpoint_every and (step_i + 1) % checkpoint_every == 0:
            save_params(params, Path(checkpoint_dir) / f"target_step{step_i + 1:06d}.npz")
    return params, losses


# ---------------------------------------------------------------------------
# policy adapters and closed-loop evaluation
# ---------------------------------------------------------------------------

class Policy(Protocol):
    def predict_chunks(
        self, observations: list[Observation], rngs: list[np.random.Generator]
    ) -> np.ndarray: ...


class TargetPolicy:
    def __init__(self, params: ParamSet, cfg: EngineConfig):
        self.params = params
        self.cfg = cfg

    def predict_chunks(self, observations, rngs):
        feats = batch_features(observations, self.cfg.max_objects)
        return sample_chunk_batch(self.params, feats, self.cfg.flow_steps, rngs, self.cfg)


class CollectorPolicy:
    def __init__(self, params: ParamSet, cfg: EngineConfig):
        self.params = params
        self.cfg = cfg

    def predict_chunks(self, observations, rngs):
        feats = batch_features(observations, self.cfg.max_objects)
        return chunk_tensor(self.params, feats, self.cfg).values


class ExpertPolicy:
    """Scripted expert wrapped as a chunk policy (simulates K steps ahead)."""

    def __init__(self, cfg: EngineConfig, t_max: int):
        self.cfg = cfg
        self.t_max = t_max

    def predict_chunks(self, observations, rngs):
        chunks = np.zeros((len(observations), self.cfg.chunk_size, ACTION_DIM))
        for i, obs in enumerate(observations):
            state = state_from_observation(obs, t_max=self.t_max)
            for k in range(self.cfg.chunk_size):
                raw = expert_action(state)
                chunks[i, k] = np.clip(raw, -1.0, 1.0)
                if not state.done:
                    state, _, _ = step(state, Action.clipped(raw))
        return chunks


def evaluate(
    policy: Policy,
    spec: TaskSpec,
    n_episodes: int,
    seed: int,
    cfg: EngineConfig,
) -> float:
    """Closed-loop success rate over reset seeds seed..seed+n-1.

    Episodes run in lockstep; per-episode noise streams keep results
    independent of how the batch shrinks as episodes finish.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    states: list[WorldState] = []
    observations: list[Observation] = []
    for j in range(n_episodes):
        state, obs = reset(spec, seed + j)
        states.append(state)
        observations.append(obs)
    rngs = [split_rng(seed + j, "flow-eval") for j in range(n_episodes)]
    buffers = [EnsembleBuffer(cfg.chunk_size, cfg.ensemble_lambda) for _ in range(n_episodes)]
    successes = np.zeros(n_episodes, dtype=bool)
    active = list(range(n_episodes))
    while active:
        chunks = policy.predict_chunks(
            [observations[j] for j in active], [rngs[j] for j in active]
        )
        still_active = []
        for row, j in enumerate(active):
            chunk = ActionChunk(actions=chunks[row], predicted_at=states[j].step)
            buffers[j].push(chunk)
            if cfg.disable_ensembling:
                raw = chunk.actions[0]
            else:
                raw = buffers[j].action(states[j].step)
            states[j], observations[j], done = step(states[j], Action.clipped(raw))
            if done:
                successes[j] = oracle_success(states[j])
            else:
                still_active.append(j)
        active = still_active
    return float(successes.mean())
