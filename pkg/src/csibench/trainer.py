"""Training and evaluation harness for the two sequence layers.

One run minimizes next-slot MSE with Adam over mini-batches, evaluates
on the given test sets at a fixed cadence, and reports per test set the
mean of the last ``tail_window`` evaluations. Runs are bitwise
reproducible for a fixed seed (wall clock aside) and always record two
reference MSEs per test set: copy-last-slot (prediction = input) and
zero prediction.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import attention, ssm
from .numkit import (
    AdamState,
    ConfigurationError,
    GradTape,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    concat_rows,
    mean_all,
)

__all__ = [
    "TrainConfig",
    "RunRecord",
    "TrainingError",
    "CheckpointError",
    "ModelTagError",
    "mse",
    "mse_tensor",
    "make_model",
    "model_predict",
    "train",
    "evaluate",
    "checkpoint_save",
    "checkpoint_load",
]

MODELS = ("msa", "ssm", "ssm_selective")


class TrainingError(RuntimeError):
    """Training diverged; carries the 1-based epoch index."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


class CheckpointError(ValueError):
    """A checkpoint file is malformed or truncated."""


class ModelTagError(CheckpointError):
    """A checkpoint holds a different model than requested."""


@dataclass
class TrainConfig:
    model: str = "msa"
    epochs: int = 1000
    batch_size: int = 32
    eval_every: int = 1
    tail_window: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    heads: int = 2
    state_dim: int = 64
    skip: bool = True
    seed: int = 0


@dataclass
class RunRecord:
    """Everything observable about one training run."""

    model: str
    config: dict
    train_loss: list = field(default_factory=list)            # per epoch
    eval_mse: dict = field(default_factory=dict)              # test key -> per-eval list
    reported_mse: dict = field(default_factory=dict)          # test key -> tail mean
    baseline_copy: dict = field(default_factory=dict)
    baseline_zero: dict = field(default_factory=dict)
    flops_fwd: int = 0
    wall_clock_s: float = 0.0
    seed: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def mse(pred, target):
    """Mean squared entry difference of two equally shaped matrices."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred - target
    return float(np.mean(diff * diff))


def mse_tensor(pred, target):
    """Differentiable MSE of a prediction Tensor against a constant target."""
    if pred.data.shape != np.shape(target):
        raise ShapeError(f"mse: shapes {pred.data.shape} and {np.shape(target)} differ")
    diff = pred - Tensor(target)
    return mean_all(diff * diff)


def make_model(cfg, n_seq, feat_dim):
    if cfg.model == "msa":
        return attention.msa_init(n_seq, feat_dim, cfg.heads, seed=cfg.seed)
    if cfg.model in ("ssm", "ssm_selective"):
        return ssm.ssm_init(
            cfg.state_dim,
            feat_dim,
            seed=cfg.seed,
            skip=cfg.skip,
            selective=(cfg.model == "ssm_selective"),
        )
    raise ConfigurationError(f"unknown model {cfg.model!r}; expected one of {MODELS}")


def model_predict(params, model, x):
    """Plain-array forward pass of either layer."""
    if model == "msa":
        y, _ = attention.msa_forward(params, x)
        return y.data
    return ssm.ssm_predict(params, x)


def _batch_loss(model, params, samples):
    if model == "msa":
        preds = [attention.msa_forward(params, s.input)[0] for s in samples]
        pred = concat_rows(preds)
        target = np.concatenate([s.target for s in samples], axis=0)
        return mse_tensor(pred, target)
    inputs = np.stack([s.input for s in samples])       # (B, T, E)
    targets = np.stack([s.target for s in samples])
    pred = ssm.ssm_forward_batch(params, inputs)        # (T*B, E) step-major
    target = np.ascontiguousarray(np.swapaxes(targets, 0, 1)).reshape(pred.data.shape)
    return mse_tensor(pred, target)


def evaluate(params, model, samples):
    """Mean test MSE; pure, order-invariant, no parameter mutation."""
    if model == "msa":
        return float(np.mean([mse(model_predict(params, model, s.input), s.target)
                              for s in samples]))
    if params.selective is not None:
        return float(np.mean([mse(ssm.ssm_predict(params, s.input), s.target)
                              for s in samples]))
    d = ssm.ssm_discretize(params)
    skip = params.skip.data if params.skip is not None else None
    return float(np.mean([mse(ssm.ssm_scan(d, s.input, skip=skip), s.target)
                          for s in samples]))


def _check_dims(cfg, n_seq, feat_dim):
    if cfg.model == "msa" and feat_dim % cfg.heads != 0:
        raise ConfigurationError(
            f"feature dim {feat_dim} is not divisible by {cfg.heads} heads"
        )
    if n_seq < 1 or feat_dim < 1:
        raise ConfigurationError("empty sequences cannot be trained on")


def train(cfg, train_samples, test_sets=None):
    """Train one layer; returns (params, RunRecord).

    ``test_sets`` maps a label to a list of samples (a bare list gets
    the label "test"). Each set is evaluated every ``eval_every`` epochs
    and its reported MSE is the mean of the last ``tail_window``
    evaluations.
    """
    if not train_samples:
        raise ConfigurationError("need at least one training sample")
    if test_sets is None:
        test_sets = {}
    elif isinstance(test_sets, list):
        test_sets = {"test": test_sets}
    n_seq, feat_dim = train_samples[0].input.shape
    _check_dims(cfg, n_seq, feat_dim)

    params = make_model(cfg, n_seq, feat_dim)
    tensors = params.tensors()
    state = AdamState(tensors, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5]))

    record = RunRecord(
        model=cfg.model,
        config=dataclasses.asdict(cfg),
        eval_mse={key: [] for key in test_sets},
        seed=cfg.seed,
    )
    started = time.perf_counter()
    n = len(train_samples)
    batch = max(1, min(cfg.batch_size, n))
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        for lo in range(0, n, batch):
            chunk = [train_samples[i] for i in order[lo:lo + batch]]
            tape = GradTape()
            tape.watch(*tensors)
            with tape:
                loss = _batch_loss(cfg.model, params, chunk)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"training loss diverged at epoch {epoch + 1}", epoch + 1)
            grads = backward(tape, loss)
            adam_step(state, tensors, grads)
            losses.append(value)
        record.train_loss.append(float(np.mean(losses)))
        if test_sets and (epoch + 1) % cfg.eval_every == 0:
            for key, samples in test_sets.items():
                record.eval_mse[key].append(evaluate(params, cfg.model, samples))

    for key, history in record.eval_mse.items():
        if history:
            tail = history[-cfg.tail_window:]
            record.reported_mse[key] = float(np.mean(tail))
    for key, samples in test_sets.items():
        record.baseline_copy[key] = float(np.mean([mse(s.input, s.target) for s in samples]))
        record.baseline_zero[key] = float(
            np.mean([mse(np.zeros_like(s.target), s.target) for s in samples])
        )
    if cfg.model == "msa":
        record.flops_fwd = attention.msa_flops(n_seq, feat_dim, cfg.heads)
    else:
        record.flops_fwd = ssm.ssm_flops(n_seq, feat_dim, cfg.state_dim)
    record.wall_clock_s = time.perf_counter() - started
    return params, record


_CKPT_MAGIC = b"CKPT1"


def _param_arrays(params, model):
    if model == "msa":
        dims = (params.n_seq, params.dim, params.heads)
        arrays = [t.data for t in params.w_qkv] + [params.w_proj.data]
    else:
        dims = (params.state_dim, params.feat_dim, 1 if params.skip is not None else 0)
        arrays = [params.log_neg_a.data, params.b_in.data, params.c_out.data,
                  params.log_delta.data]
        if params.skip is not None:
            arrays.append(params.skip.data)
        if params.selective is not None:
            arrays.extend(t.data for t in params.selective.tensors())
    return dims, arrays


def _model_tag(params):
    if isinstance(params, attention.MsaParams):
        return "msa"
    if isinstance(params, ssm.SsmParams):
        return "ssm_selective" if params.selective is not None else "ssm"
    raise TypeError(f"unknown parameter object {type(params)!r}")


def checkpoint_save(params, path):
    """Serialize parameters: magic, model tag, dim tuple, float64 arrays."""
    tag = _model_tag(params)
    dims, arrays = _param_arrays(params, tag)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        raw_tag = tag.encode("ascii")
        fh.write(struct.pack("<B", len(raw_tag)))
        fh.write(raw_tag)
        fh.write(struct.pack("<B", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(struct.pack("<B", len(arrays)))
        for arr in arrays:
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, count, path):
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointError(f"{path}: truncated checkpoint")
    return data


def checkpoint_load(path, model=None):
    """Read a checkpoint; returns (tag, params).

    With ``model`` given, a checkpoint holding any other layer raises
    ModelTagError instead of returning mismatched parameters.
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, 5, path) != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (tag_len,) = struct.unpack("<B", _read_exact(fh, 1, path))
        tag = _read_exact(fh, tag_len, path).decode("ascii")
        if tag not in MODELS:
            raise CheckpointError(f"{path}: unknown model tag {tag!r}")
        if model is not None and tag != model:
            raise ModelTagError(f"{path}: checkpoint holds {tag!r}, requested {model!r}")
        (ndims,) = struct.unpack("<B", _read_exact(fh, 1, path))
        dims = struct.unpack(f"<{ndims}I", _read_exact(fh, 4 * ndims, path))
        (count,) = struct.unpack("<B", _read_exact(fh, 1, path))
        arrays = []
        for _ in range(count):
            (nd,) = struct.unpack("<B", _read_exact(fh, 1, path))
            shape = struct.unpack(f"<{nd}I", _read_exact(fh, 4 * nd, path))
            size = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 8 * size, path)
            arrays.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after parameter payload")
    return tag, _rebuild_params(tag, dims, arrays, path)


def _rebuild_params(tag, dims, arrays, path):
    if tag == "msa":
        n_seq, dim, heads = dims
        if len(arrays) != heads + 1:
            raise CheckpointError(f"{path}: expected {heads + 1} arrays, found {len(arrays)}")
        return attention.MsaParams(
            w_qkv=[Tensor(a) for a in arrays[:heads]],
            w_proj=Tensor(arrays[heads]),
            n_seq=n_seq,
            dim=dim,
            heads=heads,
            head_dim=dim // heads,
        )
    state_dim, feat_dim, has_skip = dims
    base = 4 + has_skip
    if len(arrays) not in (base, base + 4):
        raise CheckpointError(f"{path}: unexpected array count {len(arrays)}")
    selective = None
    if tag == "ssm_selective":
        if len(arrays) != base + 4:
            raise CheckpointError(f"{path}: selective checkpoint missing map arrays")
        w_delta, b_delta, w_b, w_c = arrays[base:]
        selective = ssm.SelectiveMaps(
            w_delta=Tensor(w_delta), b_delta=Tensor(b_delta),
            w_b=Tensor(w_b), w_c=Tensor(w_c),
        )
    return ssm.SsmParams(
        log_neg_a=Tensor(arrays[0]),
        b_in=Tensor(arrays[1]),
        c_out=Tensor(arrays[2]),
        log_delta=Tensor(arrays[3]),
        skip=Tensor(arrays[4]) if has_skip else None,
        state_dim=state_dim,
        feat_dim=feat_dim,
        selective=selective,
    )
