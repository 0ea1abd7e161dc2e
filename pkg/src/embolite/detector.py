"""Stage 2: ConvLSTM multiple-instance detector over masked slice bags.

Each bag is the ordered sequence of masked 2-d slices from one study. A
ConvLSTM cell encodes every slice with context carried along the slice
axis, average pooling turns hidden maps into dense instance features, a
pluggable reducer (mean / max / multi-head self-attention) collapses the
bag, and a linear head scores it.
"""

from __future__ import annotations

import csv
import logging
import time
from pathlib import Path

import numpy as np

from . import nn
from . import preprocess as pp
from . import tensor as T
from .nn import Adam, Linear, Module, PlateauScheduler
from .preprocess import Bag
from .tensor import Tensor
from .unet import load_stage1, predict_volume_mask, _write_metrics_csv
from .volume import DataError, dataset_manifest
from .metrics import auroc, confusion

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
AGGREGATIONS = ("mean", "max", "self_attention")
ENCODERS = ("convlstm", "conv_only")

GATES = ("i", "f", "c", "o")


class ConvLSTMCell(Module):
    """Convolutional LSTM cell with per-channel peephole connections.

    All input-to-state and state-to-state transitions are 3x3 convolutions
    with padding 1, so spatial dims are preserved across time. Peephole
    weights are per-channel vectors broadcast over space, which keeps the
    cell agnostic to the instance resolution.
    """

    def __init__(self, in_channels: int, hidden: int, rng, dtype=np.float64):
        super().__init__()
        self.in_channels = in_channels
        self.hidden = hidden
        x_scale = np.sqrt(1.0 / (in_channels * 9))
        h_scale = np.sqrt(1.0 / (hidden * 9))

        def kernel(cin, scale):
            return Tensor(rng.normal(0.0, scale, (hidden, cin, 3, 3)).astype(dtype), requires_grad=True)

        self.W_xi, self.W_xf, self.W_xc, self.W_xo = (kernel(in_channels, x_scale) for _ in GATES)
        self.W_hi, self.W_hf, self.W_hc, self.W_ho = (kernel(hidden, h_scale) for _ in GATES)
        self.w_ci = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w_cf = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w_co = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.b_i = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.b_f = Tensor(np.ones(hidden, dtype=dtype), requires_grad=True)  # open forget gate at init
        self.b_c = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.b_o = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)

    def _broadcast(self, vec: Tensor) -> Tensor:
        return T.reshape(vec, (1, self.hidden, 1, 1))

    def zero_state(self, batch: int, h: int, w: int, dtype) -> tuple:
        z = np.zeros((batch, self.hidden, h, w), dtype=dtype)
        return Tensor(z), Tensor(z.copy())

    def combined_kernel(self, state_convs: bool = True) -> Tensor:
        """Gate kernels fused into one conv weight [4*hidden, in(+hidden), 3, 3].

        conv(concat(x, h), concat(W_x, W_h, axis=1)) equals the sum of the
        separate input-to-state and state-to-state convolutions, so one GEMM
        covers all four gates. Sharing the fused node across time steps lets
        backward split gate gradients once instead of once per step.
        """
        x_kernels = (self.W_xi, self.W_xf, self.W_xc, self.W_xo)
        if not state_convs:
            return T.concat(x_kernels, axis=0)
        h_kernels = (self.W_hi, self.W_hf, self.W_hc, self.W_ho)
        per_gate = [T.concat([wx, wh], axis=1) for wx, wh in zip(x_kernels, h_kernels)]
        return T.concat(per_gate, axis=0)

    def step(self, x_t: Tensor, h_prev: Tensor, c_prev: Tensor,
             kernel: Tensor | None = None, skip_state_convs: bool = False) -> tuple:
        """One recurrence step returning (h_t, c_t).

        ``skip_state_convs`` drops the state-to-state convolutions and
        peepholes (valid only when the incoming states are zero), which is
        how the no-recurrence ablation encoder is realized. ``kernel`` is an
        optional precomputed fused weight from ``combined_kernel``.
        """
        if x_t.shape[2:] != h_prev.shape[2:] or h_prev.shape != c_prev.shape:
            raise ValueError(
                f"state/input spatial dims differ: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape}"
            )
        hidden = self.hidden
        if kernel is None:
            kernel = self.combined_kernel(state_convs=not skip_state_convs)
        if skip_state_convs:
            gates = T.conv2d(x_t, kernel, stride=1, padding=1)
        else:
            gates = T.conv2d(T.concat([x_t, h_prev], axis=1), kernel, stride=1, padding=1)
        pre_i, pre_f, pre_c, pre_o = (T.narrow(gates, 1, k * hidden, hidden) for k in range(4))

        if skip_state_convs:
            i_t = T.sigmoid(T.add(pre_i, self._broadcast(self.b_i)))
            f_t = T.sigmoid(T.add(pre_f, self._broadcast(self.b_f)))
            g_t = T.tanh(T.add(pre_c, self._broadcast(self.b_c)))
            c_t = T.mul(i_t, g_t)
        else:
            i_t = T.sigmoid(T.add(T.add(pre_i, T.mul(self._broadcast(self.w_ci), c_prev)),
                                  self._broadcast(self.b_i)))
            f_t = T.sigmoid(T.add(T.add(pre_f, T.mul(self._broadcast(self.w_cf), c_prev)),
                                  self._broadcast(self.b_f)))
            g_t = T.tanh(T.add(pre_c, self._broadcast(self.b_c)))
            c_t = T.add(T.mul(f_t, c_prev), T.mul(i_t, g_t))
        o_t = T.sigmoid(T.add(T.add(pre_o, T.mul(self._broadcast(self.w_co), c_t)),
                              self._broadcast(self.b_o)))
        if T._debug_enabled():
            for gate in (i_t, f_t, o_t):
                assert np.all((gate.data > 0) & (gate.data < 1)), "gate activation left (0,1)"
        h_t = T.mul(o_t, T.tanh(c_t))
        return h_t, c_t


def convlstm_step(cell: ConvLSTMCell, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple:
    return cell.step(x_t, h_prev, c_prev)


class AttentionHead(Module):
    """Multi-head gated attention pooling over instance features.

    Per head: a_k = softmax_k( U . tanh(V z_k) ). Head outputs are
    concatenated and projected back to the feature width.
    """

    def __init__(self, d_feat: int, d_attn: int, heads: int, rng, dtype=np.float64):
        super().__init__()
        if heads < 1:
            raise ValueError(f"attention needs at least one head, got {heads}")
        self.heads = heads
        self.d_feat = d_feat
        scale = np.sqrt(1.0 / d_feat)
        self.V = [
            Tensor(rng.normal(0.0, scale, (d_attn, d_feat)).astype(dtype), requires_grad=True)
            for _ in range(heads)
        ]
        self.U = [
            Tensor(rng.normal(0.0, np.sqrt(1.0 / d_attn), (d_attn, 1)).astype(dtype), requires_grad=True)
            for _ in range(heads)
        ]
        self.projection = Linear(heads * d_feat, d_feat, rng, dtype=dtype)

    def coefficients(self, features: Tensor) -> list:
        """Per-head attention weights [B,T], each row summing to 1."""
        b, t, d = features.shape
        flat = T.reshape(features, (b * t, d))
        weights = []
        for head in range(self.heads):
            scores = T.matmul(T.tanh(T.matmul(flat, T.transpose2d(self.V[head]))), self.U[head])
            weights.append(T.softmax(T.reshape(scores, (b, t)), axis=1))
        return weights

    def forward(self, features: Tensor) -> Tensor:
        b, t, d = features.shape
        weights = self.coefficients(features)
        pooled = []
        for head in range(self.heads):
            a = T.reshape(weights[head], (b, t, 1))
            pooled.append(T.reduce_sum(T.mul(a, features), axis=1))
        return self.projection(T.concat(pooled, axis=1))


def aggregate_features(features: Tensor, method: str, attention: AttentionHead | None = None) -> Tensor:
    """Reduce [B,T,d] instance features to [B,d] bag features."""
    if method == "mean":
        return T.reduce_mean(features, axis=1)
    if method == "max":
        return T.reduce_max(features, axis=1)
    if method == "self_attention":
        if attention is None:
            raise ValueError("self_attention aggregation requires attention parameters")
        return attention(features)
    raise ValueError(f"unknown aggregation {method!r}, expected one of {AGGREGATIONS}")


def aggregate(features: Tensor, method: str, attention: AttentionHead | None = None) -> Tensor:
    """Spec surface for a single bag: [T,d] -> [d]."""
    t, d = features.shape
    batched = aggregate_features(T.reshape(features, (1, t, d)), method, attention)
    return T.reshape(batched, (d,))


class Detector(Module):
    """Instance encoder + feature aggregation + linear scoring head."""

    def __init__(self, hidden: int, pool: int, instance_hw: int, rng,
                 aggregation: str = "max", attention_heads: int = 4, attention_dim: int = 128,
                 instance_encoder: str = "convlstm", in_channels: int = 1, dtype=np.float64):
        super().__init__()
        if aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {aggregation!r}, expected one of {AGGREGATIONS}")
        if instance_encoder not in ENCODERS:
            raise ValueError(f"unknown instance encoder {instance_encoder!r}, expected one of {ENCODERS}")
        if instance_hw % pool:
            raise ValueError(f"instance size {instance_hw} not divisible by pool kernel {pool}")
        self.pool = pool
        self.instance_hw = instance_hw
        self.aggregation = aggregation
        self.instance_encoder = instance_encoder
        self.d_feat = hidden * (instance_hw // pool) ** 2
        self.cell = ConvLSTMCell(in_channels, hidden, rng, dtype=dtype)
        self.attention = (
            AttentionHead(self.d_feat, attention_dim, attention_heads, rng, dtype=dtype)
            if aggregation == "self_attention"
            else None
        )
        self.head = Linear(self.d_feat, 1, rng, dtype=dtype)
        self._dtype = dtype

    def instance_features(self, instances: np.ndarray) -> Tensor:
        """Encode [B,T,C,h,w] instance arrays into [B,T,d_feat] features."""
        b, t, c, h, w = instances.shape
        if h % self.pool or w % self.pool:
            raise ValueError(f"instance dims {h}x{w} not divisible by pool kernel {self.pool}")
        conv_only = self.instance_encoder == "conv_only"
        kernel = self.cell.combined_kernel(state_convs=not conv_only)
        h_t, c_t = self.cell.zero_state(b, h, w, self._dtype)
        feats = []
        for step in range(t):
            x_t = Tensor(np.ascontiguousarray(instances[:, step]).astype(self._dtype))
            if conv_only:
                h_t, _ = self.cell.step(x_t, *self.cell.zero_state(b, h, w, self._dtype),
                                        kernel=kernel, skip_state_convs=True)
            else:
                h_t, c_t = self.cell.step(x_t, h_t, c_t, kernel=kernel)
            pooled = T.pool2d(h_t, "avg", self.pool)
            feats.append(T.reshape(pooled, (b, self.d_feat)))
        return T.stack(feats, axis=1)

    def forward(self, instances: np.ndarray) -> Tensor:
        """Bag probabilities [B] for a batch of instance arrays."""
        features = self.instance_features(instances)
        bag_feature = aggregate_features(features, self.aggregation, self.attention)
        logits = self.head(bag_feature)
        return T.reshape(T.sigmoid(logits), (instances.shape[0],))


def encode_bag(model: Detector, bag: Bag) -> Tensor:
    """Instance features [T, d_feat] for one bag."""
    features = model.instance_features(bag.instances[None])
    return T.reshape(features, (features.shape[1], features.shape[2]))


def detect(model: Detector, bag: Bag) -> float:
    """Bag-level PE probability in [0,1]."""
    model.eval()
    with T.no_grad():
        return float(model(bag.instances[None]).data[0])


# -- losses --------------------------------------------------------------------


def _clip_probs(y_hat: Tensor) -> Tensor:
    return T.clip(y_hat, PROB_EPS, 1.0 - PROB_EPS)


def bce_loss(y_hat: Tensor, y) -> Tensor:
    """Mean binary cross-entropy; predictions clipped for stability."""
    y = Tensor(np.asarray(y, dtype=y_hat.dtype))
    p = _clip_probs(y_hat)
    term_pos = T.mul(y, T.log(p))
    term_neg = T.mul(1.0 - y, T.log(1.0 - p))
    return T.reduce_mean(T.neg(T.add(term_pos, term_neg)))


def focal_loss(y_hat: Tensor, y, gamma: float = 2.0) -> Tensor:
    """Focal modulation of BCE: easy examples are down-weighted by |error|^gamma.

    The positive term is -y (1-p)^gamma log p; the negative class uses the
    symmetric completion -(1-y) p^gamma log(1-p). At gamma = 0 this is BCE.
    """
    if gamma < 0:
        raise ValueError(f"focal gamma must be >= 0, got {gamma}")
    y = Tensor(np.asarray(y, dtype=y_hat.dtype))
    p = _clip_probs(y_hat)
    term_pos = T.mul(y, T.mul(T.power(1.0 - p, gamma), T.log(p)))
    term_neg = T.mul(1.0 - y, T.mul(T.power(p, gamma), T.log(1.0 - p)))
    return T.reduce_mean(T.neg(T.add(term_pos, term_neg)))


# -- stage 2 training ------------------------------------------------------------


def prepare_study_stack(volume, stage1_model, pre_cfg):
    """Masked, cropped, resized instance stack over the study's lung span."""
    resampled = pp.resample_z(volume, pre_cfg.target_spacing_mm)
    normalized = pp.normalize_intensity(resampled, *pre_cfg.window)
    mask = predict_volume_mask(stage1_model, normalized)
    span = pp.lung_span(normalized)
    stack = pp.masked_instance_stack(
        normalized, mask, span, pre_cfg.crop, pre_cfg.resize, pre_cfg.mask_threshold
    )
    return stack


def prepare_stage2_inputs(entries, stage1_model, pre_cfg) -> dict:
    """study_id -> (instance stack, label) for every manifest entry given."""
    stacks = {}
    for entry in entries:
        volume, _, label = entry.load()
        stacks[entry.study_id] = (prepare_study_stack(volume, stage1_model, pre_cfg), label)
    return stacks


def _middle_bag(stack: np.ndarray, length: int) -> np.ndarray:
    offset, pad_front, pad_back = pp.middle_window(len(stack), length)
    window = stack[offset : offset + length]
    if pad_front or pad_back:
        window = np.pad(window, ((pad_front, pad_back), (0, 0), (0, 0), (0, 0)))
    return window


def build_detector(stage2_cfg, instance_hw: int, rng, dtype=np.float32) -> Detector:
    return Detector(
        hidden=stage2_cfg.hidden,
        pool=stage2_cfg.pool,
        instance_hw=instance_hw,
        rng=rng,
        aggregation=stage2_cfg.aggregation,
        attention_heads=stage2_cfg.attention_heads,
        attention_dim=stage2_cfg.attention_dim,
        instance_encoder=stage2_cfg.instance_encoder,
        dtype=dtype,
    )


def _loss_fn(stage2_cfg):
    if stage2_cfg.loss == "bce":
        return bce_loss
    if stage2_cfg.loss == "focal":
        return lambda y_hat, y: focal_loss(y_hat, y, stage2_cfg.focal_gamma)
    raise ValueError(f"unknown loss {stage2_cfg.loss!r}")


def train_stage2_on_stacks(cfg, stacks: dict, entries, run_dir: Path, dtype=np.float32) -> dict:
    """Train the detector on precomputed instance stacks (stage 1 stays frozen)."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    s2 = cfg.stage2
    length = cfg.preprocess.instances

    train_ids = [e.study_id for e in entries if e.split == "train"]
    val_ids = [e.study_id for e in entries if e.split == "val"]
    if not train_ids:
        raise DataError("training split is empty")
    labels = {sid: stacks[sid][1].y for sid in train_ids + val_ids}
    if len({labels[sid] for sid in train_ids}) < 2:
        raise DataError("stage2 training needs both positive and negative studies")

    bags = {sid: _middle_bag(stacks[sid][0], length) for sid in train_ids + val_ids}
    model = build_detector(s2, cfg.preprocess.resize, np.random.default_rng([cfg.seed, 401]), dtype)
    log.info("stage2 model parameters: %d (d_feat=%d)", model.param_count(), model.d_feat)

    optimizer = Adam(list(model.named_parameters()), lr=s2.lr, weight_decay=s2.weight_decay)
    scheduler = PlateauScheduler(optimizer, s2.patience, s2.decay_factor, s2.min_lr)
    loss_fn = _loss_fn(s2)
    shuffle_rng = np.random.default_rng([cfg.seed, 402])

    def batch_array(ids):
        return np.stack([bags[sid] for sid in ids]), np.array([labels[sid] for sid in ids], dtype=float)

    def evaluate(ids):
        model.eval()
        scores = []
        with T.no_grad():
            for start in range(0, len(ids), s2.batch_size):
                chunk = ids[start : start + s2.batch_size]
                x, _ = batch_array(chunk)
                scores.extend(float(v) for v in model(x).data)
        y = np.array([labels[sid] for sid in ids], dtype=float)
        scores = np.array(scores)
        with T.no_grad():
            val_loss = loss_fn(Tensor(scores.astype(np.float64)), y).item()
        counts = confusion(scores, y.astype(int), 0.5)
        auc = auroc(scores, y.astype(int)).auc if len(set(y)) == 2 else float("nan")
        return val_loss, counts.accuracy, auc, counts.f1

    history = []
    best_auc = -np.inf
    order = list(train_ids)
    for epoch in range(1, s2.epochs + 1):
        t0 = time.monotonic()
        model.train()
        shuffle_rng.shuffle(order)
        losses = []
        for start in range(0, len(order), s2.batch_size):
            chunk = order[start : start + s2.batch_size]
            x, y = batch_array(chunk)
            optimizer.zero_grad()
            loss = loss_fn(model(x), y)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        if val_ids:
            val_loss, val_acc, val_auc, val_f1 = evaluate(val_ids)
        else:
            val_loss, val_acc, val_auc, val_f1 = train_loss, float("nan"), float("nan"), float("nan")
        lr = scheduler.step(val_loss)
        history.append({
            "epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
            "val_acc": val_acc, "val_auroc": val_auc, "val_f1": val_f1, "lr": lr,
        })
        log.info(
            "stage2 epoch %d: train_loss=%.4f val_loss=%.4f val_auroc=%s lr=%.2e (%.1fs)",
            epoch, train_loss, val_loss, f"{val_auc:.4f}", lr, time.monotonic() - t0,
        )
        if (not np.isnan(val_auc) and val_auc > best_auc) or np.isnan(val_auc):
            if not np.isnan(val_auc):
                best_auc = val_auc
            save_stage2(run_dir / "best.ckpt", model, cfg, epoch)

    save_stage2(run_dir / "final.ckpt", model, cfg, s2.epochs)
    _write_metrics_csv(
        run_dir / "metrics.csv",
        ["epoch", "train_loss", "val_loss", "val_acc", "val_auroc", "val_f1", "lr"],
        history,
    )
    best_row = max(history, key=lambda r: (-np.inf if np.isnan(r["val_auroc"]) else r["val_auroc"]))
    return {"history": history, "best": best_row, "param_count": model.param_count()}


def train_stage2(cfg, stage1_checkpoint, run_dir: Path, dtype=np.float32) -> dict:
    """End-to-end stage 2 training from a manifest and a stage 1 checkpoint."""
    stage1_checkpoint = Path(stage1_checkpoint)
    if not stage1_checkpoint.exists():
        raise DataError(f"stage1 checkpoint not found: {stage1_checkpoint}")
    stage1_model = load_stage1(stage1_checkpoint, dtype=np.float32)
    entries = dataset_manifest(cfg.data.root)
    wanted = [e for e in entries if e.split in ("train", "val")]
    stacks = prepare_stage2_inputs(wanted, stage1_model, cfg.preprocess)
    return train_stage2_on_stacks(cfg, stacks, wanted, run_dir, dtype)


def save_stage2(path, model: Detector, cfg, step: int) -> None:
    meta = {
        "kind": "stage2",
        "detector": {
            "hidden": model.cell.hidden,
            "pool": model.pool,
            "instance_hw": model.instance_hw,
            "aggregation": model.aggregation,
            "attention_heads": model.attention.heads if model.attention else 0,
            "attention_dim": model.attention.V[0].shape[0] if model.attention else 0,
            "instance_encoder": model.instance_encoder,
        },
    }
    nn.save_checkpoint(path, model.state_dict(), step=step, meta=meta, dtype="f32")


def load_stage2(path, dtype=np.float32) -> Detector:
    state, _, meta = nn.load_checkpoint(path)
    if meta.get("kind") != "stage2":
        raise nn.CheckpointError(f"{path} is not a stage2 checkpoint (kind={meta.get('kind')!r})")
    d = meta["detector"]
    model = Detector(
        hidden=d["hidden"], pool=d["pool"], instance_hw=d["instance_hw"],
        rng=np.random.default_rng(0), aggregation=d["aggregation"],
        attention_heads=max(d["attention_heads"], 1), attention_dim=max(d["attention_dim"], 1),
        instance_encoder=d["instance_encoder"], dtype=dtype,
    )
    model.load_state_dict(state)
    return model


# -- study-level inference -------------------------------------------------------


def infer_study(stage1_model, detector: Detector, volume, pre_cfg) -> tuple:
    """Score one study: max detection probability over the moving-window plan.

    Returns (probability, n_windows).
    """
    stack = prepare_study_stack(volume, stage1_model, pre_cfg)
    return infer_from_stack(detector, stack, pre_cfg)


def infer_from_stack(detector: Detector, stack: np.ndarray, pre_cfg) -> tuple:
    """(max window probability, n_windows) from a precomputed instance stack."""
    length = pre_cfg.instances
    plan = pp.plan_windows(len(stack), length, pre_cfg.overlap)
    best = 0.0
    detector.eval()
    with T.no_grad():
        for start, end in plan.windows:
            window = stack[start:end]
            if plan.padded:
                pad = length - len(window)
                window = np.pad(window, ((pad // 2, pad - pad // 2), (0, 0), (0, 0), (0, 0)))
            prob = float(detector(window[None]).data[0])
            best = max(best, prob)
    return best, len(plan.windows)
