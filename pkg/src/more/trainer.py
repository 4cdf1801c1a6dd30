"""Pre-training and fine-tuning: AdamW, gradient accumulation, early stopping, checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .dataset import Tokenizer, TripleSample, join_reports, pad_batch
from .model import ModelConfig, MoreModel
from .nn import Linear, Module
from .objective import project
from .preprocess import (
    AugmentConfig,
    EcgRecord,
    ImageRecord,
    augment_ecg,
    augment_xray,
    preprocess_ecg,
    xray_adaptive_hist_eq,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

FINETUNE_MODES = ("linear_probe", "last_k_qkv")


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.1
    accumulation_steps: int = 4
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    finetune_mode: str = "linear_probe"
    k_last_layers: int = 1
    finetune_weight_decay: float = 0.02
    finetune_lr: float = 1e-2
    finetune_epochs: int = 30
    val_fraction: float = 0.1
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.finetune_mode not in FINETUNE_MODES:
            raise ValueError(f"finetune_mode must be one of {FINETUNE_MODES}")
        if not (np.isfinite(self.lr) and self.lr >= 0 and np.isfinite(self.finetune_lr) and self.finetune_lr >= 0):
            raise ValueError("learning rates must be finite and non-negative")


# -- optimiser ----------------------------------------------------------------------------------
def adamw_step(w, g, m, v, t, lr, betas=(0.9, 0.999), eps=1e-8, wd=0.0):
    """One decoupled-weight-decay Adam update; returns ``(w, m, v)``.

    ``t`` is the 1-based step count. The decay ``-lr * wd * w`` is applied to
    the weights before, and independently of, the adaptive step.
    """
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient")
    b1, b2 = betas
    w = w - lr * wd * w
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return w - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def _decays(name: str, p) -> bool:
    # no decay on biases, norm scales, embeddings tables of rank <= 1 and the temperature
    return p.ndim >= 2 and "log_tau" not in name


class AdamW:
    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params:
            if not p.requires_grad or p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in {name}")
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            wd = self.weight_decay if _decays(name, p) else 0.0
            w, self.m[name], self.v[name] = adamw_step(p.data, p.grad, m, v, self.t, self.lr, self.betas, self.eps, wd)
            if not np.all(np.isfinite(w)):
                raise NonFiniteError(f"non-finite update in {name}")
            p.data = w

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {f"optim.m.{k}": v for k, v in self.m.items()}
        out.update({f"optim.v.{k}": v for k, v in self.v.items()})
        out["optim.t"] = np.array([self.t], dtype=np.int64)
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.t = int(state.get("optim.t", np.array([0]))[0])
        self.m = {k[len("optim.m."):]: v.copy() for k, v in state.items() if k.startswith("optim.m.")}
        self.v = {k[len("optim.v."):]: v.copy() for k, v in state.items() if k.startswith("optim.v.")}


def accumulate_and_step(loss_fn: Callable[[object], Tensor], micro_batches: Sequence, optimizer: AdamW, after_step: Optional[Callable] = None) -> float:
    """Average the gradients of ``len(micro_batches)`` mean-reduced losses, then take one step.

    A short final group (fewer micro-batches than the configured count) is
    averaged over however many it has. Returns the mean loss.
    """
    k = len(micro_batches)
    total = 0.0
    for mb in micro_batches:
        loss = loss_fn(mb)
        if not np.isfinite(loss.data):
            raise NonFiniteError("loss is not finite")
        (loss * (1.0 / k)).backward()
        total += float(loss.data)
    optimizer.step()
    optimizer.zero_grad()
    if after_step is not None:
        after_step()
    return total / k


def early_stop(history: Sequence[float], patience: int = 10) -> bool:
    """True once ``patience`` epochs have passed without a strict improvement on the best loss."""
    if not history:
        return False
    best_idx = 0
    for i, v in enumerate(history):
        if v < history[best_idx]:
            best_idx = i
    return len(history) - 1 - best_idx >= patience


# -- data ---------------------------------------------------------------------------------------
@dataclass
class PreparedData:
    """Deterministically preprocessed tensors; augmentation happens per batch."""

    images: np.ndarray  # N x H x W after equalisation, in [0, 1]
    ecgs: np.ndarray  # N x 12 x 1000
    token_ids: List[List[int]]
    labels: np.ndarray  # N class ids (-1 when not single-label)
    label_matrix: np.ndarray  # N x C in {1, 0, -1}
    classes: List[str]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "PreparedData":
        idx = np.asarray(idx, dtype=np.int64)
        return PreparedData(
            self.images[idx], self.ecgs[idx], [self.token_ids[i] for i in idx],
            self.labels[idx], self.label_matrix[idx], list(self.classes),
        )


def prepare(samples: Sequence[TripleSample], tokenizer: Tokenizer, classes: Optional[Sequence[str]] = None) -> PreparedData:
    if classes is None:
        classes = list(samples[0].labels) if samples and samples[0].labels else []
    images = np.stack([xray_adaptive_hist_eq(s.image).pixels for s in samples])
    ecgs = np.stack([preprocess_ecg(s.ecg).leads for s in samples])
    ids = [join_reports(s.xray_note, s.ecg_note, tokenizer) for s in samples]
    lm = np.array([[s.labels.get(c, 0) for c in classes] for s in samples], dtype=np.int64).reshape(len(samples), len(classes))
    return PreparedData(images, ecgs, ids, np.array([s.label for s in samples]), lm, list(classes))


def split_indices(n: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded (train, held-out) split; held-out has ``round(n * fraction)`` items."""
    perm = np.random.default_rng([seed, 7919]).permutation(n)
    k = int(round(n * fraction))
    return np.sort(perm[k:]), np.sort(perm[:k])


def split_subjects(subject_ids: Sequence[str], fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded subject-level split: ``round(n_subjects * fraction)`` subjects go to the held-out side."""
    subjects = sorted(set(subject_ids))
    held = set(subjects[j] for j in split_indices(len(subjects), fraction, seed)[1])
    mask = np.array([s in held for s in subject_ids], dtype=bool)
    return np.nonzero(~mask)[0], np.nonzero(mask)[0]


def make_batch(data: PreparedData, idx, mean: float, std: float, aug: Optional[AugmentConfig], seed: int, epoch: int):
    images, ecgs = [], []
    for i in idx:
        img, sig = data.images[i], data.ecgs[i]
        if aug is not None:
            rng = np.random.default_rng([seed, epoch, int(i)])
            img = augment_xray(ImageRecord(img), aug, rng).pixels
            sig = augment_ecg(EcgRecord(sig, 100.0), aug, rng).leads
        images.append(img)
        ecgs.append(sig)
    ids, valid = pad_batch([data.token_ids[i] for i in idx])
    return (np.stack(images) - mean) / std, np.stack(ecgs), ids, valid


# -- checkpoints -----------------------------------------------------------------------------
def model_meta(model: MoreModel, tokenizer: Tokenizer, mean: float, std: float, classes, epoch: int, extra: Optional[dict] = None) -> dict:
    cfg = model.cfg.to_dict()
    meta = {
        "model_config": cfg,
        "config_digest": ckpt.config_digest(cfg),
        "vocab": tokenizer.itos,
        "image_mean": mean,
        "image_std": std,
        "classes": list(classes),
        "epoch": epoch,
        "tau": model.temperature.value,
    }
    if extra:
        meta.update(extra)
    return meta


def save_checkpoint(path, model: MoreModel, meta: dict, optimizer: Optional[AdamW] = None, extra_tensors: Optional[Dict[str, np.ndarray]] = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update(optimizer.state_dict())
    if extra_tensors:
        tensors.update(extra_tensors)
    ckpt.save(path, tensors, meta)


def load_checkpoint(path):
    """Return ``(model, tokenizer, meta, tensors)``."""
    tensors, meta = ckpt.load(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = MoreModel(cfg)
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    model.eval()
    return model, Tokenizer(meta["vocab"][4:]), meta, tensors


# -- pre-training -------------------------------------------------------------------------------
@dataclass
class PretrainResult:
    model: MoreModel
    optimizer: AdamW
    history: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    image_mean: float = 0.0
    image_std: float = 1.0


def validation_loss(model: MoreModel, data: PreparedData, mean: float, std: float, batch_size: int) -> float:
    model.eval()
    total, count = 0.0, 0
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            if len(idx) < 2:
                continue
            imgs, ecgs, ids, valid = make_batch(data, idx, mean, std, None, 0, 0)
            total += float(model.loss(imgs, ecgs, ids, valid).data) * len(idx)
            count += len(idx)
    model.train()
    return total / max(count, 1)


def pretrain(
    train: PreparedData,
    val: Optional[PreparedData],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    aug: Optional[AugmentConfig] = None,
    log_fn: Optional[Callable[[dict], None]] = None,
    model: Optional[MoreModel] = None,
) -> PretrainResult:
    """Contrastive pre-training with seeded shuffling, augmentation and accumulation.

    The model with the lowest validation loss (or the last one without a
    validation split) is returned. Divergence raises :class:`NonFiniteError`
    after restoring the last good weights.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    model = model if model is not None else MoreModel(model_cfg)
    model.train()
    mean, std = float(train.images.mean()), float(train.images.std())
    if aug is None and cfg.augment:
        aug = AugmentConfig(seed=cfg.seed)
    opt = AdamW(model.named_parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    result = PretrainResult(model, opt, image_mean=mean, image_std=std)
    best_val = np.inf
    best_state = {k: v.copy() for k, v in model.state_dict().items()}
    val_hist: List[float] = []

    def run_micro(batch):
        imgs, ecgs, ids, valid, rng = batch
        return model.loss(imgs, ecgs, ids, valid, rng)

    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        micro = [order[s : s + cfg.batch_size] for s in range(0, len(order), cfg.batch_size)]
        micro = [m for m in micro if len(m) >= 2]
        losses = []
        for g in range(0, len(micro), cfg.accumulation_steps):
            group = []
            for j, idx in enumerate(micro[g : g + cfg.accumulation_steps]):
                imgs, ecgs, ids, valid = make_batch(train, idx, mean, std, aug if cfg.augment else None, cfg.seed, epoch)
                group.append((imgs, ecgs, ids, valid, np.random.default_rng([cfg.seed, epoch, g + j, 1])))
            last_good = {k: v.copy() for k, v in model.state_dict().items()}
            try:
                losses.append(accumulate_and_step(run_micro, group, opt, model.temperature.clamp_))
            except NonFiniteError:
                model.load_state_dict(last_good)
                raise
        rec = {"epoch": epoch + 1, "split": "train", "loss": float(np.mean(losses)), "tau": model.temperature.value, "lr": cfg.lr}
        result.history.append(rec)
        if log_fn:
            log_fn(rec)
        if val is not None and len(val) >= 2:
            vl = validation_loss(model, val, mean, std, cfg.batch_size)
            vrec = {"epoch": epoch + 1, "split": "val", "loss": vl, "tau": model.temperature.value, "lr": cfg.lr}
            result.history.append(vrec)
            if log_fn:
                log_fn(vrec)
            val_hist.append(vl)
            if vl < best_val:
                best_val = vl
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
                result.best_epoch = epoch + 1
            if early_stop(val_hist, cfg.patience):
                break
        else:
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            result.best_epoch = epoch + 1
    model.load_state_dict(best_state)
    model.eval()
    return result


# -- fine-tuning ------------------------------------------------------------------------------
class Classifier(Module):
    def __init__(self, d_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.fc = Linear(d_in, n_out, rng=rng)

    def forward(self, z: Tensor) -> Tensor:
        return self.fc(z)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, stable for large |logits|."""
    y = np.asarray(targets, dtype=np.float64)
    abs_x = T.relu(logits) + T.relu(-logits)
    softplus = T.relu(logits) + T.log(1.0 + T.exp(-abs_x))
    return T.mean(softplus - logits * y)


def softmax_cross_entropy(logits: Tensor, classes: np.ndarray) -> Tensor:
    classes = np.asarray(classes, dtype=np.int64)
    logp = T.log_softmax(logits, axis=1)
    return -T.mean(logp[np.arange(len(classes)), classes])


def _modality_parts(model: MoreModel, modality: str):
    if modality == "image":
        return model.image_encoder, model.image_head
    if modality == "ecg":
        return model.ecg_encoder, model.ecg_head
    raise ValueError(f"unknown modality {modality!r}")


def set_finetune_trainable(model: MoreModel, mode: str, modality: str, k_last: int = 1) -> None:
    """Freeze everything, then open the projector (and, for ``last_k_qkv``, the last ``k`` q/k/v weights)."""
    if mode not in FINETUNE_MODES:
        raise ValueError(f"mode must be one of {FINETUNE_MODES}")
    encoder, head = _modality_parts(model, modality)
    model.freeze()
    head.unfreeze()
    if mode == "last_k_qkv":
        for blk in encoder.transformer.blocks[-k_last:] if k_last > 0 else []:
            for name in ("q", "k", "v"):
                getattr(blk.attn, name).weight.requires_grad = True


@dataclass
class FinetuneResult:
    model: MoreModel
    classifier: Classifier
    history: List[float]
    task: str
    modality: str


def finetune(
    model: MoreModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    modality: str = "image",
    task: str = "multilabel",
    mode: Optional[str] = None,
) -> FinetuneResult:
    """Train a classifier on projected embeddings.

    ``inputs`` are ready-to-encode arrays (normalised images or preprocessed
    ECGs). ``task='multilabel'`` takes an ``N x C`` 0/1 matrix and uses
    per-label binary cross-entropy; ``task='multiclass'`` takes ``N`` class ids
    and softmax cross-entropy. The encoder always runs in eval mode so its
    buffers are untouched.
    """
    mode = mode or cfg.finetune_mode
    targets = np.asarray(targets)
    if task == "multilabel":
        if targets.ndim != 2:
            raise ValueError("multilabel targets must be N x C")
        n_out = targets.shape[1]
        loss_of = bce_with_logits
    elif task == "multiclass":
        if targets.ndim != 1:
            raise ValueError("multiclass targets must be a vector of class ids")
        n_out = int(targets.max()) + 1
        loss_of = softmax_cross_entropy
    else:
        raise ValueError(f"unknown task {task!r}")
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets differ in length")

    set_finetune_trainable(model, mode, modality, cfg.k_last_layers)
    encoder, head = _modality_parts(model, modality)
    encoder.eval()
    head.train()
    clf = Classifier(head.fc2.weight.shape[1], n_out, np.random.default_rng([cfg.seed, 31]))
    named = [(f"{modality}_head.{n}", p) for n, p in head.named_parameters()] + [(f"classifier.{n}", p) for n, p in clf.named_parameters()]
    if mode == "last_k_qkv":
        named += [(n, p) for n, p in encoder.named_parameters() if p.requires_grad]
    opt = AdamW(named, cfg.finetune_lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.finetune_weight_decay)

    cached = None
    if mode == "linear_probe":
        with T.no_grad():
            cached = np.concatenate([encoder(inputs[s : s + 64])[0].data for s in range(0, len(inputs), 64)])

    history = []
    for epoch in range(cfg.finetune_epochs):
        order = np.random.default_rng([cfg.seed, 101, epoch]).permutation(len(inputs))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            if len(idx) < 2:
                continue
            feats = Tensor(cached[idx]) if cached is not None else encoder(inputs[idx])[0]
            z = project(head, feats)
            loss = loss_of(clf(z), targets[idx])
            loss.backward()
            opt.step()
            opt.zero_grad()
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    head.eval()
    model.eval()
    return FinetuneResult(model, clf, history, task, modality)


def predict(result: FinetuneResult, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class probabilities (sigmoid for multilabel, softmax for multiclass)."""
    encoder, head = _modality_parts(result.model, result.modality)
    encoder.eval()
    head.eval()
    out = []
    with T.no_grad():
        for s in range(0, len(inputs), batch_size):
            z = project(head, encoder(inputs[s : s + batch_size])[0])
            logits = result.classifier(z).data
            if result.task == "multilabel":
                out.append(1.0 / (1.0 + np.exp(-logits)))
            else:
                e = np.exp(logits - logits.max(axis=1, keepdims=True))
                out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out)


def write_log(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
