"""Learned tracker network and its joint training.

Four sub-networks share one embedding space: a detection encoder (MLP over
geometry + appearance + motion features), temporal fusion (self-attention
over a track's detection history producing a single track query), a track
state decoder (MLP from query to the previous-frame state), and a
track-detection interaction block (cross-attention from the query to the
current frame's context detections, emitting per-detection association
scores and a current-frame state).

All positions are encoded relative to the track's last observed position
(the anchor), which makes every output translation-equivariant; decoded
state positions are anchor-relative and the caller adds the anchor back.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, AdamWConfig, Tensor
from .core import Detection, StateVector, center_distance
from .sim import FALSE_POSITIVE, Scenario

GEOMETRY_WIDTH = 8  # rel cx, rel cy, w, l, h, sin(heading), cos(heading), conf


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True, slots=True)
class SttConfig:
    d_q: int = 32
    d_a: int = 16
    d_m: int = 2
    t_max: int = 10
    k_max: int = 20
    context_radius: float = 10.0
    heads: int = 2
    mlp_hidden: int = 64
    gamma: float = 10.0
    lambda_position: float = 1.0
    lambda_velocity: float = 1.0
    lambda_acceleration: float = 10.0
    alpha: float = 1.0
    pooling: str = "mean"  # "mean" | "last"
    state_source: str = "tsd"  # "tsd" | "tdi"

    def __post_init__(self) -> None:
        if self.t_max < 1 or self.k_max < 1:
            raise ValueError("t_max and k_max must be >= 1")
        if min(self.d_q, self.d_a, self.d_m, self.mlp_hidden, self.heads) < 1:
            raise ValueError("widths must be >= 1")
        if self.d_q % self.heads != 0:
            raise ValueError(f"d_q={self.d_q} not divisible by heads={self.heads}")
        weights = (
            self.gamma,
            self.lambda_position,
            self.lambda_velocity,
            self.lambda_acceleration,
            self.alpha,
        )
        if any(w < 0 for w in weights):
            raise ValueError("loss weights must be >= 0")
        if self.pooling not in ("mean", "last"):
            raise ValueError(f"unknown pooling mode: {self.pooling!r}")
        if self.state_source not in ("tsd", "tdi"):
            raise ValueError(f"unknown state source: {self.state_source!r}")
        if self.context_radius <= 0:
            raise ValueError("context_radius must be > 0")

    @property
    def feature_width(self) -> int:
        return GEOMETRY_WIDTH + self.d_a + self.d_m

    @property
    def state_weights(self) -> np.ndarray:
        return np.array(
            [
                self.lambda_position,
                self.lambda_position,
                self.lambda_velocity,
                self.lambda_velocity,
                self.lambda_acceleration,
                self.lambda_acceleration,
            ]
        )

    def to_dict(self) -> dict:
        return {
            "d_q": self.d_q,
            "d_a": self.d_a,
            "d_m": self.d_m,
            "t_max": self.t_max,
            "k_max": self.k_max,
            "context_radius": self.context_radius,
            "heads": self.heads,
            "mlp_hidden": self.mlp_hidden,
            "gamma": self.gamma,
            "lambda_position": self.lambda_position,
            "lambda_velocity": self.lambda_velocity,
            "lambda_acceleration": self.lambda_acceleration,
            "alpha": self.alpha,
            "pooling": self.pooling,
            "state_source": self.state_source,
        }


@dataclass(frozen=True, slots=True)
class TrainingExample:
    history: tuple[Detection, ...]  # <= t_max, ordered by frame, up to t-1
    context: tuple[Detection, ...]  # <= k_max, at frame t
    labels: tuple[int, ...]  # 0/1 per context detection; at most one 1
    state_t: StateVector  # ground truth at t, absolute coordinates
    state_prev: StateVector  # ground truth at t-1, absolute coordinates
    anchor: tuple[float, float]  # last observed position of the track

    def __post_init__(self) -> None:
        if not self.history:
            raise ValueError("history must be non-empty")
        if len(self.labels) != len(self.context):
            raise ValueError("labels must align with context detections")
        if sum(self.labels) > 1:
            raise ValueError("at most one context detection may be labeled 1")


# --- parameters --------------------------------------------------------------


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cfg: SttConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, h, f = cfg.d_q, cfg.mlp_hidden, cfg.feature_width

    def param(arr: np.ndarray) -> Tensor:
        return Tensor(arr, requires_grad=True)

    p: dict[str, Tensor] = {}
    p["de.w1"] = param(_xavier(rng, f, h))
    p["de.b1"] = param(np.zeros(h))
    p["de.w2"] = param(_xavier(rng, h, d))
    p["de.b2"] = param(np.zeros(d))

    p["tf.pe"] = param(rng.normal(0.0, 0.02, size=(cfg.t_max, d)))
    for name in ("wq", "wk", "wv", "wo"):
        p[f"tf.{name}"] = param(_xavier(rng, d, d))
    p["tf.ln_g"] = param(np.ones(d))
    p["tf.ln_b"] = param(np.zeros(d))

    p["tsd.w1"] = param(_xavier(rng, d, h))
    p["tsd.b1"] = param(np.zeros(h))
    p["tsd.w2"] = param(_xavier(rng, h, 6))
    p["tsd.b2"] = param(np.zeros(6))

    for name in ("wq", "wk", "wv", "wo"):
        p[f"tdi.{name}"] = param(_xavier(rng, d, d))
    p["tdi.ln_g"] = param(np.ones(d))
    p["tdi.ln_b"] = param(np.zeros(d))
    p["tdi.score_w1"] = param(_xavier(rng, 2 * d, h))
    p["tdi.score_b1"] = param(np.zeros(h))
    p["tdi.score_w2"] = param(_xavier(rng, h, 1))
    p["tdi.score_b2"] = param(np.zeros(1))
    p["tdi.state_w1"] = param(_xavier(rng, d, h))
    p["tdi.state_b1"] = param(np.zeros(h))
    p["tdi.state_w2"] = param(_xavier(rng, h, 6))
    p["tdi.state_b2"] = param(np.zeros(6))
    return p


# --- feature building --------------------------------------------------------


def detection_features(
    det: Detection, anchor: tuple[float, float], cfg: SttConfig
) -> np.ndarray:
    """Flat [geometry, appearance, motion] input row for the encoder."""
    if len(det.appearance) != cfg.d_a:
        raise ValueError(
            f"appearance width {len(det.appearance)} != configured d_a {cfg.d_a}"
        )
    if len(det.motion) != cfg.d_m:
        raise ValueError(f"motion width {len(det.motion)} != configured d_m {cfg.d_m}")
    box = det.box
    out = np.empty(cfg.feature_width)
    out[0] = box.center[0] - anchor[0]
    out[1] = box.center[1] - anchor[1]
    out[2:5] = box.size
    out[5] = math.sin(box.heading)
    out[6] = math.cos(box.heading)
    out[7] = det.confidence
    out[8 : 8 + cfg.d_a] = det.appearance
    out[8 + cfg.d_a :] = det.motion
    return out


def state_targets(state: StateVector, anchor: tuple[float, float]) -> np.ndarray:
    """Anchor-relative [x, y, vx, vy, ax, ay] regression target."""
    arr = state.as_array()
    arr[0] -= anchor[0]
    arr[1] -= anchor[1]
    return arr


@dataclass(slots=True)
class Batch:
    hist_feat: np.ndarray  # (B, T, F)
    hist_mask: np.ndarray  # (B, T) bool
    pe_onehot: np.ndarray  # (B, T, T) recency one-hots, zero rows at pads
    pool_weights: np.ndarray  # (B, 1, T)
    ctx_feat: np.ndarray  # (B, K, F)
    ctx_mask: np.ndarray  # (B, K) bool
    labels: np.ndarray  # (B, K) float
    target_t: np.ndarray  # (B, 6)
    target_prev: np.ndarray  # (B, 6)

    @property
    def size(self) -> int:
        return self.hist_feat.shape[0]


def pack_batch(
    examples: list[TrainingExample],
    cfg: SttConfig,
    history_slots: list[np.ndarray] | None = None,
    context_slots: list[np.ndarray] | None = None,
) -> Batch:
    """Pad examples into batch arrays.

    Slot layouts are arbitrary (tests exercise re-layouts of padding): each
    real element carries its recency index into the positional table, so the
    physical slot never matters.
    """
    b, t, k, f = len(examples), cfg.t_max, cfg.k_max, cfg.feature_width
    batch = Batch(
        hist_feat=np.zeros((b, t, f)),
        hist_mask=np.zeros((b, t), dtype=bool),
        pe_onehot=np.zeros((b, t, t)),
        pool_weights=np.zeros((b, 1, t)),
        ctx_feat=np.zeros((b, k, f)),
        ctx_mask=np.zeros((b, k), dtype=bool),
        labels=np.zeros((b, k)),
        target_t=np.zeros((b, 6)),
        target_prev=np.zeros((b, 6)),
    )
    for i, ex in enumerate(examples):
        n_hist = len(ex.history)
        if n_hist > t:
            raise ValueError(f"history length {n_hist} exceeds t_max {t}")
        if len(ex.context) > k:
            raise ValueError(f"context size {len(ex.context)} exceeds k_max {k}")
        h_slots = (
            np.arange(n_hist) if history_slots is None else np.asarray(history_slots[i])
        )
        c_slots = (
            np.arange(len(ex.context))
            if context_slots is None
            else np.asarray(context_slots[i])
        )
        for j, det in enumerate(ex.history):
            slot = int(h_slots[j])
            batch.hist_feat[i, slot] = detection_features(det, ex.anchor, cfg)
            batch.hist_mask[i, slot] = True
            batch.pe_onehot[i, slot, t - n_hist + j] = 1.0  # recency index
        last_slot = int(h_slots[n_hist - 1])
        if cfg.pooling == "mean":
            batch.pool_weights[i, 0, h_slots[:n_hist]] = 1.0 / n_hist
        else:
            batch.pool_weights[i, 0, last_slot] = 1.0
        for j, det in enumerate(ex.context):
            slot = int(c_slots[j])
            batch.ctx_feat[i, slot] = detection_features(det, ex.anchor, cfg)
            batch.ctx_mask[i, slot] = True
            batch.labels[i, slot] = float(ex.labels[j])
        batch.target_t[i] = state_targets(ex.state_t, ex.anchor)
        batch.target_prev[i] = state_targets(ex.state_prev, ex.anchor)
    return batch


# --- network forward ---------------------------------------------------------


def _mlp(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    hidden = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}w1"]), params[f"{prefix}b1"]))
    return ad.add(ad.matmul(hidden, params[f"{prefix}w2"]), params[f"{prefix}b2"])


def encode_batch(params: dict[str, Tensor], feat: Tensor) -> Tensor:
    """Detection encoder over (..., F) feature rows."""
    return _mlp(feat, params, "de.")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, hd = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * hd))


def _self_attention(
    x: Tensor, params: dict[str, Tensor], prefix: str, heads: int, key_mask: np.ndarray
) -> Tensor:
    q = _split_heads(ad.matmul(x, params[f"{prefix}wq"]), heads)
    k = _split_heads(ad.matmul(x, params[f"{prefix}wk"]), heads)
    v = _split_heads(ad.matmul(x, params[f"{prefix}wv"]), heads)
    att = ad.attention(q, k, v, key_mask=key_mask[:, None, None, :])
    return ad.matmul(_merge_heads(att), params[f"{prefix}wo"])


def temporal_fuse_batch(
    params: dict[str, Tensor],
    cfg: SttConfig,
    hist_emb: Tensor,
    hist_mask: np.ndarray,
    pe_onehot: np.ndarray,
    pool_weights: np.ndarray,
) -> Tensor:
    """Self-attend over a history of embeddings and pool to one query each."""
    pe = ad.matmul(Tensor(pe_onehot), params["tf.pe"])
    x = ad.add(hist_emb, pe)
    att = _self_attention(x, params, "tf.", cfg.heads, hist_mask)
    fused = ad.layer_norm(ad.add(x, att), params["tf.ln_g"], params["tf.ln_b"])
    pooled = ad.matmul(Tensor(pool_weights), fused)  # (B, 1, D)
    return ad.reshape(pooled, (pooled.shape[0], pooled.shape[2]))


def decode_state_batch(params: dict[str, Tensor], query: Tensor) -> Tensor:
    return _mlp(query, params, "tsd.")


def tdi_batch(
    params: dict[str, Tensor],
    cfg: SttConfig,
    query: Tensor,
    ctx_emb: Tensor,
    ctx_mask: np.ndarray,
) -> tuple[Tensor, Tensor, Tensor]:
    """Cross-attend a query to its context; score each slot and decode a state.

    Returns (scores, logits, state): scores are sigmoids zeroed at padded
    slots, logits are raw (for the stable loss), state is (B, 6).
    """
    b, d = query.shape
    q3 = ad.reshape(query, (b, 1, d))
    qh = _split_heads(ad.matmul(q3, params["tdi.wq"]), cfg.heads)
    kh = _split_heads(ad.matmul(ctx_emb, params["tdi.wk"]), cfg.heads)
    vh = _split_heads(ad.matmul(ctx_emb, params["tdi.wv"]), cfg.heads)
    att = ad.attention(qh, kh, vh, key_mask=ctx_mask[:, None, None, :])
    att = ad.matmul(_merge_heads(att), params["tdi.wo"])
    fused3 = ad.layer_norm(
        ad.add(q3, att), params["tdi.ln_g"], params["tdi.ln_b"]
    )  # (B, 1, D)
    state = _mlp(ad.reshape(fused3, (b, d)), params, "tdi.state_")

    k = ctx_emb.shape[1]
    tiled = ad.add(Tensor(np.zeros((b, k, d))), fused3)  # broadcast query per slot
    pair = ad.concat([ctx_emb, tiled], axis=2)
    logits = _mlp(pair, params, "tdi.score_")
    logits = ad.reshape(logits, (b, k))
    scores = ad.mul(ad.sigmoid(logits), Tensor(ctx_mask.astype(float)))
    return scores, logits, state


def binary_cross_entropy_with_logits(
    logits: Tensor, labels: np.ndarray, mask: np.ndarray
) -> Tensor:
    """Per-example BCE summed over live slots; padded slots contribute zero."""
    y = Tensor(labels)
    bce = ad.sub(ad.softplus(logits), ad.mul(logits, y))
    return ad.sum_(ad.mul(bce, Tensor(mask.astype(float))), axis=1)


def weighted_l1(pred: Tensor, target: np.ndarray, weights: np.ndarray) -> Tensor:
    err = ad.abs_(ad.sub(pred, Tensor(target)))
    return ad.sum_(ad.mul(err, Tensor(weights)), axis=1)


def loss_components_batch(
    params: dict[str, Tensor], cfg: SttConfig, batch: Batch
) -> dict[str, Tensor]:
    """Mean per-example loss terms and their weighted total."""
    hist_emb = encode_batch(params, Tensor(batch.hist_feat))
    query = temporal_fuse_batch(
        params, cfg, hist_emb, batch.hist_mask, batch.pe_onehot, batch.pool_weights
    )
    state_prev = decode_state_batch(params, query)
    ctx_emb = encode_batch(params, Tensor(batch.ctx_feat))
    _, logits, state_t = tdi_batch(params, cfg, query, ctx_emb, batch.ctx_mask)

    w6 = cfg.state_weights
    loss_d = ad.mean(binary_cross_entropy_with_logits(logits, batch.labels, batch.ctx_mask))
    loss_s_t = ad.mean(weighted_l1(state_t, batch.target_t, w6))
    loss_s_prev = ad.mean(weighted_l1(state_prev, batch.target_prev, w6))
    total = ad.add(
        ad.mul(loss_d, ad.Tensor(cfg.gamma)),
        ad.add(loss_s_t, ad.mul(loss_s_prev, ad.Tensor(cfg.alpha))),
    )
    return {
        "loss_d": loss_d,
        "loss_s_t": loss_s_t,
        "loss_s_prev": loss_s_prev,
        "total": total,
    }


# --- single-example operations (thin wrappers over the batch paths) ----------


def encode_detection(
    det: Detection, params: dict[str, Tensor], cfg: SttConfig,
    anchor: tuple[float, float] | None = None,
) -> np.ndarray:
    anchor = anchor if anchor is not None else det.box.center_xy
    feat = detection_features(det, anchor, cfg)[None, :]
    return encode_batch(params, Tensor(feat)).data[0]


def temporal_fuse(
    history_embeddings: list[np.ndarray], params: dict[str, Tensor], cfg: SttConfig
) -> np.ndarray:
    n = len(history_embeddings)
    if not 1 <= n <= cfg.t_max:
        raise ValueError(f"history length must be in [1, {cfg.t_max}], got {n}")
    t = cfg.t_max
    emb = np.zeros((1, t, cfg.d_q))
    emb[0, :n] = np.asarray(history_embeddings)
    mask = np.zeros((1, t), dtype=bool)
    mask[0, :n] = True
    onehot = np.zeros((1, t, t))
    onehot[0, np.arange(n), t - n + np.arange(n)] = 1.0
    pool = np.zeros((1, 1, t))
    if cfg.pooling == "mean":
        pool[0, 0, :n] = 1.0 / n
    else:
        pool[0, 0, n - 1] = 1.0
    return temporal_fuse_batch(params, cfg, Tensor(emb), mask, onehot, pool).data[0]


def decode_state(query: np.ndarray, params: dict[str, Tensor]) -> StateVector:
    """Anchor-relative state decoded from a track query."""
    out = decode_state_batch(params, Tensor(np.asarray(query)[None, :])).data[0]
    return StateVector.from_array(out)


def select_context(
    track_pred: StateVector, dets: list[Detection], d: float, k: int
) -> list[Detection]:
    """The <= k nearest detections within radius d of the predicted position."""
    if d <= 0 or k < 1:
        raise ValueError("need d > 0 and k >= 1")
    ranked = []
    for det in dets:
        dist = center_distance(track_pred, det.box)
        if dist < d:
            ranked.append((dist, det.detection_id, det))
    ranked.sort(key=lambda item: (item[0], item[1]))
    return [det for _, _, det in ranked[:k]]


def tdi_forward(
    query: np.ndarray,
    context: list[Detection],
    params: dict[str, Tensor],
    cfg: SttConfig,
    anchor: tuple[float, float],
) -> tuple[np.ndarray, StateVector]:
    """Association scores over one track's context plus its decoded state."""
    if not context:
        raise ValueError("context must be non-empty")
    k = cfg.k_max
    feat = np.zeros((1, k, cfg.feature_width))
    mask = np.zeros((1, k), dtype=bool)
    for j, det in enumerate(context):
        feat[0, j] = detection_features(det, anchor, cfg)
        mask[0, j] = True
    ctx_emb = encode_batch(params, Tensor(feat))
    scores, _, state = tdi_batch(
        params, cfg, Tensor(np.asarray(query)[None, :]), ctx_emb, mask
    )
    return scores.data[0], StateVector.from_array(state.data[0])


def loss_total(
    example: TrainingExample, params: dict[str, Tensor], cfg: SttConfig
) -> Tensor:
    batch = pack_batch([example], cfg)
    return loss_components_batch(params, cfg, batch)["total"]


# --- dataset extraction ------------------------------------------------------


def extract_examples(
    scenario: Scenario, cfg: SttConfig, max_per_object: int | None = None
) -> list[TrainingExample]:
    """Build supervised examples from simulator provenance.

    One example per (object, frame) where the object has at least one prior
    associated detection: the history is its last <= t_max detections before
    frame t, the context is selected around the ground-truth state at t, and
    the positive label marks the object's own detection when present.
    """
    per_object: dict[int, list[tuple[int, Detection]]] = {}
    for k, (frame, prov) in enumerate(zip(scenario.detections, scenario.provenance)):
        for det, oid in zip(frame, prov):
            if oid != FALSE_POSITIVE:
                per_object.setdefault(oid, []).append((k, det))

    examples: list[TrainingExample] = []
    for track in scenario.gt_tracks:
        obs = per_object.get(track.object_id, [])
        if not obs:
            continue
        obs_frames = [frame for frame, _ in obs]
        count = 0
        ptr = 0  # number of observations strictly before frame t
        for t in range(obs_frames[0] + 1, scenario.frames):
            while ptr < len(obs) and obs_frames[ptr] < t:
                ptr += 1
            prior = [det for _, det in obs[max(0, ptr - cfg.t_max) : ptr]]
            if not prior:
                continue
            context = select_context(
                track.states[t],
                list(scenario.detections[t]),
                cfg.context_radius,
                cfg.k_max,
            )
            if not context:
                continue
            own_id = (
                obs[ptr][1].detection_id
                if ptr < len(obs) and obs_frames[ptr] == t
                else None
            )
            labels = tuple(
                1 if det.detection_id == own_id else 0 for det in context
            )
            anchor = prior[-1].box.center_xy
            examples.append(
                TrainingExample(
                    history=tuple(prior),
                    context=tuple(context),
                    labels=labels,
                    state_t=track.states[t],
                    state_prev=track.states[t - 1],
                    anchor=anchor,
                )
            )
            count += 1
            if max_per_object is not None and count >= max_per_object:
                break
    return examples


# --- training ----------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class TrainSettings:
    steps: int = 2000
    batch_size: int = 64
    log_every: int = 50
    optimizer: AdamWConfig = AdamWConfig()

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")


def train(
    examples: list[TrainingExample],
    cfg: SttConfig,
    settings: TrainSettings,
    seed: int,
) -> tuple[dict[str, Tensor], list[dict[str, float]]]:
    """Train on a fixed example set; deterministic for a fixed seed."""
    if not examples:
        raise ValueError("training requires a non-empty dataset")
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed=int(rng.integers(2**31)))
    opt = AdamW(params, settings.optimizer)
    log: list[dict[str, float]] = []
    n = len(examples)
    for step in range(1, settings.steps + 1):
        idx = rng.integers(0, n, size=min(settings.batch_size, n))
        batch = pack_batch([examples[i] for i in idx], cfg)
        losses = loss_components_batch(params, cfg, batch)
        total = losses["total"]
        if not math.isfinite(total.item()):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        total.backward()
        lr = opt.step(step)
        if step % settings.log_every == 0 or step == 1 or step == settings.steps:
            log.append(
                {
                    "step": step,
                    "lr": lr,
                    "loss_d": losses["loss_d"].item(),
                    "loss_s_t": losses["loss_s_t"].item(),
                    "loss_s_prev": losses["loss_s_prev"].item(),
                    "total": total.item(),
                }
            )
    return params, log


def write_training_log(path, log: list[dict[str, float]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["step", "lr", "loss_d", "loss_s_t", "loss_s_prev", "total"]
        )
        writer.writeheader()
        writer.writerows(log)


def evaluate_loss(
    examples: list[TrainingExample], params: dict[str, Tensor], cfg: SttConfig,
    batch_size: int = 256,
) -> float:
    """Mean total loss over a dataset (no gradient bookkeeping)."""
    total = 0.0
    with ad.no_grad():
        for lo in range(0, len(examples), batch_size):
            chunk = examples[lo : lo + batch_size]
            batch = pack_batch(chunk, cfg)
            total += loss_components_batch(params, cfg, batch)["total"].item() * len(chunk)
    return total / len(examples)


# --- batched inference (used by the online tracker) ---------------------------


def queries_from_histories(
    params: dict[str, Tensor],
    cfg: SttConfig,
    histories: list[list[Detection]],
    anchors: list[tuple[float, float]],
) -> np.ndarray:
    """Track queries for a batch of detection histories (last <= t_max used)."""
    b, t, f = len(histories), cfg.t_max, cfg.feature_width
    feat = np.zeros((b, t, f))
    mask = np.zeros((b, t), dtype=bool)
    onehot = np.zeros((b, t, t))
    pool = np.zeros((b, 1, t))
    for i, (history, anchor) in enumerate(zip(histories, anchors)):
        tail = history[-t:]
        n = len(tail)
        if n == 0:
            raise ValueError("history must be non-empty")
        for j, det in enumerate(tail):
            feat[i, j] = detection_features(det, anchor, cfg)
        mask[i, :n] = True
        onehot[i, np.arange(n), t - n + np.arange(n)] = 1.0
        if cfg.pooling == "mean":
            pool[i, 0, :n] = 1.0 / n
        else:
            pool[i, 0, n - 1] = 1.0
    with ad.no_grad():
        emb = encode_batch(params, Tensor(feat))
        query = temporal_fuse_batch(params, cfg, emb, mask, onehot, pool)
    return query.data


def context_scores(
    params: dict[str, Tensor],
    cfg: SttConfig,
    queries: np.ndarray,
    contexts: list[list[Detection]],
    anchors: list[tuple[float, float]],
) -> tuple[np.ndarray, np.ndarray]:
    """Association scores and current-frame states for a batch of tracks.

    Returns (scores (B, k_max), states (B, 6) anchor-relative). Every context
    must be non-empty; padded slots score exactly zero.
    """
    b, k, f = len(contexts), cfg.k_max, cfg.feature_width
    feat = np.zeros((b, k, f))
    mask = np.zeros((b, k), dtype=bool)
    for i, (context, anchor) in enumerate(zip(contexts, anchors)):
        if not context:
            raise ValueError("context must be non-empty")
        for j, det in enumerate(context[:k]):
            feat[i, j] = detection_features(det, anchor, cfg)
            mask[i, j] = True
    with ad.no_grad():
        ctx_emb = encode_batch(params, Tensor(feat))
        scores, _, states = tdi_batch(
            params, cfg, Tensor(np.asarray(queries)), ctx_emb, mask
        )
    return scores.data, states.data


def decode_states(params: dict[str, Tensor], queries: np.ndarray) -> np.ndarray:
    """Anchor-relative states for a batch of queries."""
    with ad.no_grad():
        return decode_state_batch(params, Tensor(np.asarray(queries))).data


def association_accuracy(
    examples: list[TrainingExample], params: dict[str, Tensor], cfg: SttConfig,
    batch_size: int = 256,
) -> float:
    """Fraction of positive-labeled examples whose positive wins the argmax."""
    hits = 0
    totals = 0
    with ad.no_grad():
        for lo in range(0, len(examples), batch_size):
            chunk = [ex for ex in examples[lo : lo + batch_size] if sum(ex.labels) == 1]
            if not chunk:
                continue
            batch = pack_batch(chunk, cfg)
            hist_emb = encode_batch(params, Tensor(batch.hist_feat))
            query = temporal_fuse_batch(
                params, cfg, hist_emb, batch.hist_mask, batch.pe_onehot,
                batch.pool_weights,
            )
            ctx_emb = encode_batch(params, Tensor(batch.ctx_feat))
            scores, _, _ = tdi_batch(params, cfg, query, ctx_emb, batch.ctx_mask)
            predicted = scores.data.argmax(axis=1)
            expected = batch.labels.argmax(axis=1)
            hits += int((predicted == expected).sum())
            totals += len(chunk)
    return hits / totals if totals else float("nan")
