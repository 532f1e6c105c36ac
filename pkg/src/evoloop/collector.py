"""Lightweight collector policy: heterogeneous encoders feed a conditioning
memory, a cross-attention decoder turns learnable queries into an action
chunk, and overlapping chunks are blended by exponential temporal ensembling.
Trained by behavior cloning on chunk targets.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .core.rng import split_rng
from .core.store import DatasetManifest
from .core.types import ACTION_DIM, Action, ActionChunk, EngineConfig, Observation, Trajectory, trajectory_id
from .envsim import TaskSpec, observe, oracle_success, reset, step


# ---------------------------------------------------------------------------
# featurization
# ---------------------------------------------------------------------------

def vis_dim(cfg: EngineConfig) -> int:
    return 3 * cfg.max_objects + 3


def obs_features(obs: Observation, max_objects: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Split an observation into the visual slice (objects + goal), the
    proprioceptive slice, and the task id."""
    vis = np.zeros(3 * max_objects + 3, dtype=np.float64)
    for i, (x, y, held) in enumerate(obs.objects[:max_objects]):
        vis[3 * i : 3 * i + 3] = (x, y, 1.0 if held else 0.0)
    vis[3 * max_objects :] = obs.goal
    state = np.array(obs.proprio, dtype=np.float64)
    return vis, state, obs.task_id


def batch_features(observations: list[Observation], max_objects: int) -> dict:
    vis = np.zeros((len(observations), 3 * max_objects + 3), dtype=np.float64)
    state = np.zeros((len(observations), 3), dtype=np.float64)
    task = np.zeros(len(observations), dtype=np.int64)
    for i, obs in enumerate(observations):
        vis[i], state[i], task[i] = obs_features(obs, max_objects)
    return {"vis": vis, "state": state, "task": task}


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _init_mlp(params: ParamSet, name: str, d_in: int, d_out: int, width: int, rng) -> None:
    params.add(f"{name}/w1", rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, width)))
    params.add(f"{name}/b1", np.zeros(width))
    params.add(f"{name}/w2", rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, d_out)))
    params.add(f"{name}/b2", np.zeros(d_out))


def _init_ln(params: ParamSet, name: str, d: int) -> None:
    params.add(f"{name}/g", np.ones(d))
    params.add(f"{name}/b", np.zeros(d))


def _init_attn(params: ParamSet, name: str, d: int, rng) -> None:
    s = 1.0 / np.sqrt(d)
    for part in ("wq", "wk", "wv", "wo"):
        params.add(f"{name}/{part}", rng.normal(0.0, s, size=(d, d)))
    for part in ("bq", "bk", "bv", "bo"):
        params.add(f"{name}/{part}", np.zeros(d))


def _init_block(params: ParamSet, name: str, d: int, mlp_ratio: int, rng, self_attn: bool) -> None:
    _init_ln(params, f"{name}/ln1", d)
    _init_attn(params, f"{name}/ca", d, rng)
    if self_attn:
        _init_ln(params, f"{name}/ln_sa", d)
        _init_attn(params, f"{name}/sa", d, rng)
    _init_ln(params, f"{name}/ln2", d)
    width = mlp_ratio * d
    params.add(f"{name}/ffn/w1", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, width)))
    params.add(f"{name}/ffn/b1", np.zeros(width))
    params.add(f"{name}/ffn/w2", rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, d)))
    params.add(f"{name}/ffn/b2", np.zeros(d))


def init_encoder_params(params: ParamSet, cfg: EngineConfig, rng) -> None:
    d = cfg.hidden_dim
    _init_mlp(params, "enc_vis", vis_dim(cfg), d, d, rng)
    _init_mlp(params, "enc_state", 3, d, d, rng)
    params.add("task_embed", rng.normal(0.0, 0.5, size=(cfg.n_tasks, d)))
    _init_ln(params, "mem_ln", d)


def init_collector_params(cfg: EngineConfig, seed: int) -> ParamSet:
    rng = split_rng(seed, "collector-init")
    params = ParamSet()
    d = cfg.hidden_dim
    init_encoder_params(params, cfg, rng)
    params.add("queries", rng.normal(0.0, 0.5, size=(cfg.chunk_size, d)))
    for i in range(cfg.decoder_blocks):
        _init_block(params, f"blk{i}", d, cfg.mlp_ratio, rng, self_attn=False)
    _init_ln(params, "out_ln", d)
    params.add("head/w", np.zeros((d, ACTION_DIM)))
    params.add("head/b", np.zeros(ACTION_DIM))
    return params


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _mlp(params: ParamSet, name: str, x: Tensor) -> Tensor:
    h = ad.gelu(ad.linear(x, params[f"{name}/w1"], params[f"{name}/b1"]))
    return ad.linear(h, params[f"{name}/w2"], params[f"{name}/b2"])


def _cross_attn(params: ParamSet, name: str, q_in: Tensor, kv: Tensor) -> Tensor:
    q = ad.linear(q_in, params[f"{name}/wq"], params[f"{name}/bq"])
    k = ad.linear(kv, params[f"{name}/wk"], params[f"{name}/bk"])
    v = ad.linear(kv, params[f"{name}/wv"], params[f"{name}/bv"])
    return ad.linear(ad.attention(q, k, v), params[f"{name}/wo"], params[f"{name}/bo"])


def _ffn(params: ParamSet, name: str, x: Tensor) -> Tensor:
    h = ad.gelu(ad.linear(x, params[f"{name}/w1"], params[f"{name}/b1"]))
    return ad.linear(h, params[f"{name}/w2"], params[f"{name}/b2"])


def _ln(params: ParamSet, name: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{name}/g"], params[f"{name}/b"])


@dataclass
class ConditioningMemory:
    z_vis: Tensor  # (B, d)
    z_lang: Tensor  # (B, d)
    z_state: Tensor  # (B, d)
    memory: Tensor  # (B, 3, d), rows [z_vis; z_lang; z_state]
    step_index: int = 0


def encode_batch(params: ParamSet, feats: dict) -> ConditioningMemory:
    z_vis = _mlp(params, "enc_vis", ad.constant(feats["vis"]))
    z_lang = ad.embedding(params["task_embed"], feats["task"])
    z_state = _mlp(params, "enc_state", ad.constant(feats["state"]))
    memory = _ln(params, "mem_ln", ad.stack_tokens([z_vis, z_lang, z_state]))
    return ConditioningMemory(z_vis=z_vis, z_lang=z_lang, z_state=z_state, memory=memory)


def encode(obs: Observation, params: ParamSet, cfg: EngineConfig) -> ConditioningMemory:
    mem = encode_batch(params, batch_features([obs], cfg.max_objects))
    mem.step_index = obs.step_index
    return mem


def decode_chunks(params: ParamSet, memory: Tensor, cfg: EngineConfig) -> Tensor:
    """Cross-attention decoder: learnable queries over the memory -> (B, K, d_a)."""
    b = memory.shape[0]
    x = ad.expand_rows(params["queries"], b)
    for i in range(cfg.decoder_blocks):
        name = f"blk{i}"
        x = ad.add(x, _cross_attn(params, f"{name}/ca", _ln(params, f"{name}/ln1", x), memory))
        x = ad.add(x, _ffn(params, f"{name}/ffn", _ln(params, f"{name}/ln2", x)))
    x = _ln(params, "out_ln", x)
    return ad.linear(x, params["head/w"], params["head/b"])


def chunk_tensor(params: ParamSet, feats: dict, cfg: EngineConfig) -> Tensor:
    return decode_chunks(params, encode_batch(params, feats).memory, cfg)


def predict_chunk(memory: ConditioningMemory, params: ParamSet, cfg: EngineConfig) -> ActionChunk:
    out = decode_chunks(params, memory.memory, cfg)
    values = out.values[0]
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite action chunk")
    return ActionChunk(actions=values, predicted_at=memory.step_index)


# ---------------------------------------------------------------------------
# temporal ensembling
# ---------------------------------------------------------------------------

def ensemble_weights(count: int, decay: float) -> np.ndarray:
    """Normalized exp(-decay * k) over ages k = 0..count-1 (newest first)."""
    w = np.exp(-decay * np.arange(count, dtype=np.float64))
    return w / w.sum()


class EnsembleBuffer:
    """Ring of the last K predicted chunks; blends overlapping predictions."""

    def __init__(self, chunk_size: int, decay: float):
        if decay < 0.0:
            raise ValueError("decay must be >= 0")
        self.chunk_size = chunk_size
        self.decay = decay
        self._chunks: deque[ActionChunk] = deque(maxlen=chunk_size)

    def __len__(self) -> int:
        return len(self._chunks)

    def push(self, chunk: ActionChunk) -> None:
        if chunk.size != self.chunk_size:
            raise ValueError("chunk size mismatch")
        self._chunks.append(chunk)

    def action(self, t: int) -> np.ndarray:
        """Eq-style blend: the chunk predicted at t-k contributes its k-th action."""
        if not self._chunks:
            raise ValueError("empty ensemble buffer")
        contrib = []
        ages = []
        for chunk in self._chunks:
            k = t - chunk.predicted_at
            if 0 <= k < self.chunk_size:
                ages.append(k)
                contrib.append(chunk.actions[k])
        if not contrib:
            raise ValueError(f"no chunk covers step {t}")
        order = np.argsort(ages)  # newest (smallest age) first
        ages_arr = np.array(ages, dtype=np.float64)[order]
        contrib_arr = np.stack(contrib)[order]
        w = np.exp(-self.decay * ages_arr)
        w /= w.sum()
        return w @ contrib_arr


def ensemble_action(buffer: EnsembleBuffer, t: int) -> np.ndarray:
    return buffer.action(t)


# ---------------------------------------------------------------------------
# behavior cloning
# ---------------------------------------------------------------------------

def build_chunk_dataset(manifest: DatasetManifest, cfg: EngineConfig) -> dict:
    """Flatten a manifest into per-frame features and K-step action targets.

    Targets past the end of a trajectory repeat its final action.
    """
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    vis_all, state_all, task_all, target_all = [], [], [], []
    k = cfg.chunk_size
    for entry in manifest:
        traj = entry.load()
        feats = batch_features([obs for obs, _act in traj.frames], cfg.max_objects)
        actions = traj.actions_array()
        padded = np.concatenate([actions, np.repeat(actions[-1:], k - 1, axis=0)], axis=0)
        windows = np.lib.stride_tricks.sliding_window_view(padded, (k, ACTION_DIM))[:, 0]
        vis_all.append(feats["vis"])
        state_all.append(feats["state"])
        task_all.append(feats["task"])
        target_all.append(windows.copy())
    return {
        "vis": np.concatenate(vis_all),
        "state": np.concatenate(state_all),
        "task": np.concatenate(task_all),
        "targets": np.concatenate(target_all),
    }


def bc_loss(params: ParamSet, batch: dict, cfg: EngineConfig) -> Tensor:
    pred = chunk_tensor(params, batch, cfg)
    return ad.mse_loss(pred, batch["targets"])


def train_bc(
    params: ParamSet,
    manifest: DatasetManifest,
    cfg: EngineConfig,
    seed: int,
) -> tuple[ParamSet, list[float]]:
    """Behavior cloning with AdamW on uniformly sampled frames."""
    data = build_chunk_dataset(manifest, cfg)
    n = data["vis"].shape[0]
    rng = split_rng(seed, "bc-train")
    losses = []
    for _ in range(cfg.collector_steps):
        idx = rng.integers(0, n, size=min(cfg.collector_batch, n))
        batch = {
            "vis": data["vis"][idx],
            "state": data["state"][idx],
            "task": data["task"][idx],
            "targets": data["targets"][idx],
        }
        loss = bc_loss(params, batch, cfg)
        params.zero_grad()
        ad.backward(loss)
        ad.adam_step(params, cfg.collector_lr, weight_decay=cfg.weight_decay)
        losses.append(loss.item())
    return params, losses


# ---------------------------------------------------------------------------
# closed-loop rollout
# ---------------------------------------------------------------------------

def rollout(
    params: ParamSet,
    spec: TaskSpec,
    seed: int,
    cfg: EngineConfig,
    traj_id: str | None = None,
    iteration: int = 0,
    policy_tag: str = "collector",
) -> Trajectory:
    """Closed-loop episode: predict a chunk every step, blend, act.

    Failures are recorded (oracle_success=False), never raised.
    """
    state, obs = reset(spec, seed)
    buffer = EnsembleBuffer(cfg.chunk_size, cfg.ensemble_lambda)
    frames: list[tuple[Observation, Action]] = []
    done = False
    while not done:
        memory = encode(obs, params, cfg)
        buffer.push(predict_chunk(memory, params, cfg))
        act = Action.clipped(buffer.action(state.step))
        state, next_obs, done = step(state, act)
        frames.append((obs, act))
        obs = next_obs
    return Trajectory(
        id=traj_id or trajectory_id(seed, iteration, seed, spec.task_id),
        task_id=spec.task_id,
        instruction=spec.instruction,
        frames=frames,
        terminal=obs,
        oracle_success=oracle_success(state),
        verdict=None,
        iteration=iteration,
        rng_seed=seed,
        policy_tag=policy_tag,
    )
