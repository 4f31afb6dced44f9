"""Split-batch training loop with variance-guided regression weighting.

Each iteration draws one mini-batch from the shuffled epoch permutation
and splits it in half: the clean half (horizontal flip only) trains the
backbone and prototypes through the margin loss and feeds the variance
tracker; the augmented half produces certainty-ratio pseudo-labels and
trains the regression head through the weighted Smooth-L1 loss.
Degraded images therefore never touch the margin loss.  The unsplit
mode (``split_batch=False``) feeds the full batch to both losses, which
reproduces the plain pseudo-label baseline and, with augmentation on,
the backbone-degradation control experiment.

All mutable training state is float32 so checkpoints round-trip
bit-identically, and every random draw is derived from
(seed, purpose, epoch, sample index), so a resumed run replays the
exact stream of an uninterrupted one.
"""

import dataclasses
import struct
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import margin, quality, variance
from .configio import build_config
from .errors import ConfigError, FormatError, NumericError
from .rngstreams import (
    T_AUG,
    T_FLIP,
    T_INIT_BACKBONE,
    T_INIT_BANK,
    T_PERM,
    T_TRACKED,
    rng_for,
)
from .synthdata import augment, hflip
from . import evalkit

CKPT_MAGIC = b"IGFQCKPT"
CKPT_VERSION = 1

VARIANTS = ("ig", "cr", "ig-noaug", "cr-aug")
TRACKER_SOURCES = ("clean", "augmented", "both")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lam: float = 10.0
    lr: float = 0.1
    lr_milestones: tuple = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    head_weight_decay: float = 0.0
    epochs: int = 30
    augment_p: float = 0.3
    seed: int = 0
    propagate_lig_to_backbone: bool = False
    tracker_source: str = "clean"
    beta: float = 1.0
    scale: float = 64.0
    margin: float = 0.5
    embed_dim: int = 64
    hidden_dim: int = 128
    head_bias: bool = False
    lig_reduction: str = "sum"
    split_batch: bool = True
    use_ig_weights: bool = True
    alpha_start: float = 0.9
    alpha_end: float = 1.0

    def validate(self):
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ConfigError("batch_size must be an even number >= 2")
        if self.lam < 0.0:
            raise ConfigError("lam must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 <= self.augment_p <= 1.0:
            raise ConfigError("augment_p must lie in [0, 1]")
        if self.tracker_source not in TRACKER_SOURCES:
            raise ConfigError(f"tracker_source must be one of {TRACKER_SOURCES}")
        if self.lig_reduction not in ("sum", "mean"):
            raise ConfigError("lig_reduction must be 'sum' or 'mean'")
        ms = self.lr_milestones
        if ms is not None:
            if list(ms) != sorted(set(ms)):
                raise ConfigError("lr_milestones must be strictly increasing")
            if any(m < 1 or m >= self.epochs for m in ms):
                raise ConfigError("lr_milestones must lie in [1, epochs)")

    def milestones(self):
        """Resolved milestone epochs (60% and 80% of the run if unset)."""
        if self.lr_milestones is not None:
            return tuple(self.lr_milestones)
        auto = {int(np.floor(0.6 * self.epochs)),
                int(np.floor(0.8 * self.epochs))}
        return tuple(sorted(m for m in auto if 1 <= m < self.epochs))

    def lr_at(self, epoch):
        drops = sum(1 for m in self.milestones() if epoch >= m)
        return self.lr * (0.1 ** drops)


def parse_train_config(path, overrides=None):
    return build_config(TrainConfig, path, overrides=overrides,
                        field_types={"lr_milestones": tuple})


def apply_variant(config, variant):
    """Map an experiment variant onto config flags.

    ig       full method: split batch, weights on, augmentation on
    cr       baseline: unsplit, weights forced to 1, no augmentation
    ig-noaug split batch, weights on, no augmentation
    cr-aug   unsplit, weights forced to 1, augmentation on both halves
    """
    if variant == "ig":
        return dataclasses.replace(config, split_batch=True,
                                   use_ig_weights=True)
    if variant == "cr":
        return dataclasses.replace(config, split_batch=False,
                                   use_ig_weights=False, augment_p=0.0)
    if variant == "ig-noaug":
        return dataclasses.replace(config, split_batch=True,
                                   use_ig_weights=True, augment_p=0.0)
    if variant == "cr-aug":
        return dataclasses.replace(config, split_batch=False,
                                   use_ig_weights=False)
    raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class StepInfo:
    l_arc: float
    l_ig: float
    cr_targets: np.ndarray
    sample_weights: np.ndarray
    ccs_clean: np.ndarray


@dataclass
class EpochLog:
    epoch: int
    l_arc: float
    l_ig: float
    ccs_dist: float
    pearson_var_v: float
    frac_zero_weight: float
    tracker_v: np.ndarray = None


@dataclass
class TrainState:
    model: bb.MlpBackbone
    bank: margin.PrototypeBank
    head: quality.RegressionHead
    tracker: variance.VarianceTracker
    momentum: dict
    epoch: int = 0
    step_in_epoch: int = 0
    global_step: int = 0
    epoch_logs: list = field(default_factory=list)
    last_step: StepInfo = None

    def trainable(self):
        params = {"w1": self.model.w1, "b1": self.model.b1,
                  "w2": self.model.w2, "b2": self.model.b2,
                  "bank_w": self.bank.weights, "head_w": self.head.weight}
        return params


def init_train_state(config, dataset):
    config.validate()
    steps_per_epoch = dataset.num_samples // config.batch_size
    total_steps = max(1, config.epochs * steps_per_epoch)
    model = bb.init_backbone(dataset.side * dataset.side,
                             hidden_dim=config.hidden_dim,
                             embed_dim=config.embed_dim,
                             rng=rng_for(config.seed, T_INIT_BACKBONE),
                             dtype=np.float32)
    bank = margin.init_bank(config.embed_dim, dataset.num_classes,
                            scale=config.scale, margin=config.margin,
                            rng=rng_for(config.seed, T_INIT_BANK),
                            dtype=np.float32)
    head = quality.init_head(config.embed_dim, with_bias=config.head_bias,
                             beta=config.beta, dtype=np.float32)
    tracker = variance.init_tracker(dataset.num_classes, total_steps,
                                    alpha_start=config.alpha_start,
                                    alpha_end=config.alpha_end,
                                    dtype=np.float32)
    momentum = {name: np.zeros_like(arr) for name, arr in
                TrainState(model, bank, head, tracker, {}).trainable().items()}
    if config.head_bias:
        momentum["head_b"] = np.zeros(1, dtype=np.float32)
    return TrainState(model=model, bank=bank, head=head, tracker=tracker,
                      momentum=momentum)


def sgd_update(param, grad, buffer, lr, momentum, weight_decay):
    """Classical momentum with weight decay folded into the gradient:
    buffer <- momentum*buffer + grad + wd*param; param <- param - lr*buffer.
    Mutates and returns (param, buffer)."""
    buffer *= momentum
    buffer += grad + weight_decay * param
    param -= lr * buffer
    return param, buffer


def _finite_or_abort(state, l_arc, l_ig):
    if np.isfinite(l_arc) and np.isfinite(l_ig):
        return
    norms = {name: float(np.linalg.norm(arr))
             for name, arr in state.trainable().items()}
    raise NumericError(
        f"non-finite loss at epoch {state.epoch} step {state.global_step}: "
        f"l_arc={l_arc}, l_ig={l_ig}, param_norms={norms}")


def train_step(state, config, clean_batch, aug_batch, lr):
    """One optimization step; see the module docstring for the batch
    semantics.  ``clean_batch``/``aug_batch`` are (images, labels)."""
    clean_imgs, clean_labels = clean_batch
    aug_imgs, aug_labels = aug_batch

    emb_clean, cache_clean = bb.forward(state.model, clean_imgs)
    arc = margin.arcface_loss(state.bank, emb_clean, clean_labels)

    emb_aug, cache_aug = bb.forward(state.model, aug_imgs)
    cos_aug = margin.cosines(state.bank, emb_aug)
    cr_aug = margin.cr_batch(cos_aug, aug_labels)

    if config.tracker_source == "clean":
        grouped = variance.group_ccs_by_class(clean_labels, arc.cr.ccs)
    elif config.tracker_source == "augmented":
        grouped = variance.group_ccs_by_class(aug_labels, cr_aug.ccs)
    else:
        grouped = variance.group_ccs_by_class(
            np.concatenate([clean_labels, aug_labels]),
            np.concatenate([arc.cr.ccs, cr_aug.ccs]))
    variance.update(state.tracker, grouped)

    if config.use_ig_weights:
        sample_w = variance.weights(state.tracker).w[aug_labels]
    else:
        sample_w = np.ones(len(aug_labels), dtype=state.tracker.v.dtype)

    reg = quality.weighted_regression_loss(state.head, emb_aug, cr_aug.cr,
                                           sample_w,
                                           reduction=config.lig_reduction)
    _finite_or_abort(state, arc.loss, reg.loss)

    grads_backbone = bb.backward(state.model, cache_clean, arc.grad_emb)
    if config.propagate_lig_to_backbone and config.lam > 0.0:
        extra = bb.backward(state.model, cache_aug,
                            config.lam * reg.grad_emb)
        for name, arr in extra.as_dict().items():
            grads_backbone.as_dict()[name] += arr

    grads = dict(grads_backbone.as_dict())
    grads["bank_w"] = arc.grad_bank
    grads["head_w"] = config.lam * reg.grad_weight

    params = state.trainable()
    for name in params:
        wd = (config.head_weight_decay if name == "head_w"
              else config.weight_decay)
        sgd_update(params[name], grads[name].astype(params[name].dtype,
                                                    copy=False),
                   state.momentum[name], lr, config.momentum, wd)
    if config.head_bias:
        gb = np.array([config.lam * reg.grad_bias], dtype=np.float32)
        bias = np.array([state.head.bias], dtype=np.float32)
        sgd_update(bias, gb, state.momentum["head_b"], lr, config.momentum,
                   config.head_weight_decay)
        state.head.bias = np.float32(bias[0])

    state.global_step += 1
    state.last_step = StepInfo(l_arc=arc.loss, l_ig=reg.loss,
                               cr_targets=cr_aug.cr, sample_weights=sample_w,
                               ccs_clean=arc.cr.ccs)
    return state


# ---------------------------------------------------------------------------
# epoch loop

def _build_half(dataset, indices, config, epoch, degraded):
    imgs = np.empty((len(indices), dataset.side, dataset.side),
                    dtype=dataset.images.dtype)
    for row, i in enumerate(indices):
        i = int(i)
        img = hflip(dataset.images[i], rng_for(config.seed, T_FLIP, epoch, i))
        if degraded and config.augment_p > 0.0:
            img = augment(img, rng_for(config.seed, T_AUG, epoch, i),
                          config.augment_p)
        imgs[row] = img
    return imgs, np.asarray(dataset.labels, dtype=np.int64)[indices]


def _tracked_ccs(state, dataset, tracked_idx):
    emb = evalkit.embed_dataset(state.model, dataset.images[tracked_idx])
    cos = margin.cosines(state.bank, emb)
    labels = np.asarray(dataset.labels, dtype=np.int64)[tracked_idx]
    return cos[np.arange(len(tracked_idx)), labels]


def effective_weights(state, config):
    if config.use_ig_weights:
        return variance.weights(state.tracker).w
    return np.ones_like(state.tracker.v)


def run_training(config, dataset, state=None, checkpoint_dir=None):
    """Run the full loop; returns (state, epoch logs).

    Steps per epoch = floor(dataset / batch_size); the clean and
    augmented halves are disjoint slices of the shuffled epoch
    permutation.  Per-epoch logs record both loss terms, the mean CCS
    drift of a fixed tracked sample set, the correlation between the
    tracker and the exact oracle variance, and the zero-weight fraction.
    Checkpoints are written at milestone epochs and at the end when
    ``checkpoint_dir`` is given.
    """
    config.validate()
    if state is None:
        state = init_train_state(config, dataset)
    n = dataset.num_samples
    b = config.batch_size
    steps_per_epoch = n // b
    if config.epochs > 0 and steps_per_epoch == 0:
        raise ConfigError("batch_size exceeds the dataset size")

    tracked_idx = rng_for(config.seed, T_TRACKED).choice(
        n, size=min(200, n), replace=False)
    prev_snapshot = _tracked_ccs(state, dataset, tracked_idx)

    half = b // 2
    milestones = set(config.milestones())
    for epoch in range(state.epoch, config.epochs):
        lr = config.lr_at(epoch)
        perm = rng_for(config.seed, T_PERM, epoch).permutation(n)
        arc_sum = 0.0
        ig_sum = 0.0
        n_steps = 0
        for t in range(state.step_in_epoch, steps_per_epoch):
            idx = perm[t * b:(t + 1) * b]
            if config.split_batch:
                clean = _build_half(dataset, idx[:half], config, epoch, False)
                aug = _build_half(dataset, idx[half:], config, epoch, True)
            else:
                full = _build_half(dataset, idx, config, epoch, True)
                clean = aug = full
            train_step(state, config, clean, aug, lr)
            arc_sum += state.last_step.l_arc
            ig_sum += state.last_step.l_ig
            n_steps += 1
            state.step_in_epoch = t + 1
        state.epoch = epoch + 1
        state.step_in_epoch = 0

        snapshot = _tracked_ccs(state, dataset, tracked_idx)
        drift = evalkit.ccs_dist(prev_snapshot, snapshot)
        prev_snapshot = snapshot
        try:
            rho = evalkit.pearson(evalkit.oracle_variance(dataset, state.model),
                                  state.tracker.v)
        except Exception:
            rho = float("nan")
        w = effective_weights(state, config)
        state.epoch_logs.append(EpochLog(
            epoch=epoch,
            l_arc=arc_sum / max(n_steps, 1),
            l_ig=ig_sum / max(n_steps, 1),
            ccs_dist=drift,
            pearson_var_v=rho,
            frac_zero_weight=float(np.mean(w == 0.0)),
            tracker_v=state.tracker.v.copy(),
        ))
        if checkpoint_dir is not None and (epoch in milestones
                                           or epoch == config.epochs - 1):
            checkpoint_save(state,
                            f"{checkpoint_dir}/ckpt_epoch{epoch:04d}.bin")
    return state, list(state.epoch_logs)


def write_report_csv(epoch_logs, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,l_arc,l_ig,ccs_dist,pearson_var_v,frac_zero_weight\n")
        for log in epoch_logs:
            fh.write(f"{log.epoch},{log.l_arc:.9g},{log.l_ig:.9g},"
                     f"{log.ccs_dist:.9g},{log.pearson_var_v:.9g},"
                     f"{log.frac_zero_weight:.9g}\n")


# ---------------------------------------------------------------------------
# checkpointing

def _write_array(fh, arr):
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array(fh, shape, what):
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(count * 4)
    if len(raw) != count * 4:
        raise FormatError(f"truncated checkpoint while reading {what}",
                          offset=fh.tell())
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def _param_order(state):
    names = ["w1", "b1", "w2", "b2", "bank_w", "head_w"]
    if state.head.bias is not None:
        names.append("head_b")
    return names


def checkpoint_save(state, path):
    """Serialize all parameters, momentum buffers, tracker state, and
    counters.  Round trip is bit-identical because the state is float32.
    """
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<IIII", state.model.input_dim,
                             state.model.hidden_dim, state.model.embed_dim,
                             state.bank.num_classes))
        fh.write(struct.pack("<B", 1 if state.head.bias is not None else 0))
        fh.write(struct.pack("<IIQ", state.epoch, state.step_in_epoch,
                             state.global_step))
        fh.write(struct.pack("<II", state.tracker.step,
                             state.tracker.total_steps))
        # hyperparameter scalars keep full precision; only learned
        # parameter arrays are stored as f32
        fh.write(struct.pack("<ddddd", state.bank.scale, state.bank.margin,
                             state.head.beta, state.tracker.alpha_start,
                             state.tracker.alpha_end))
        arrays = [state.model.w1, state.model.b1, state.model.w2,
                  state.model.b2, state.bank.weights, state.head.weight]
        if state.head.bias is not None:
            arrays.append(np.array([state.head.bias]))
        arrays.append(state.tracker.v)
        for name in _param_order(state):
            arrays.append(state.momentum[name])
        for arr in arrays:
            _write_array(fh, arr)


def checkpoint_load(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
        header = fh.read(4 + 16 + 1 + 16 + 8 + 40)
        if len(header) != 85:
            raise FormatError("truncated checkpoint header", offset=fh.tell())
        (version, input_dim, hidden_dim, embed_dim, num_classes, has_bias,
         epoch, step_in_epoch, global_step, t_step, t_total, scale, marg,
         beta, a_start, a_end) = struct.unpack("<IIIIIBIIQIIddddd", header)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        model = bb.MlpBackbone(
            w1=_read_array(fh, (input_dim, hidden_dim), "w1"),
            b1=_read_array(fh, (hidden_dim,), "b1"),
            w2=_read_array(fh, (hidden_dim, embed_dim), "w2"),
            b2=_read_array(fh, (embed_dim,), "b2"))
        bank = margin.PrototypeBank(
            weights=_read_array(fh, (embed_dim, num_classes), "bank"),
            scale=float(scale), margin=float(marg))
        head_w = _read_array(fh, (embed_dim,), "head weight")
        bias = None
        if has_bias:
            bias = np.float32(_read_array(fh, (1,), "head bias")[0])
        head = quality.RegressionHead(weight=head_w, bias=bias,
                                      beta=float(beta))
        tracker = variance.VarianceTracker(
            v=_read_array(fh, (num_classes,), "tracker v"),
            step=t_step, total_steps=t_total,
            alpha_start=float(a_start), alpha_end=float(a_end))
        state = TrainState(model=model, bank=bank, head=head, tracker=tracker,
                           momentum={}, epoch=epoch,
                           step_in_epoch=step_in_epoch,
                           global_step=global_step)
        for name in _param_order(state):
            shape = ((1,) if name == "head_b"
                     else state.trainable()[name].shape)
            state.momentum[name] = _read_array(fh, shape, f"momentum {name}")
        if fh.read(1):
            raise FormatError("unexpected trailing bytes in checkpoint",
                              offset=fh.tell() - 1)
    return state
