"""Training and evaluation harness: Adamax with selective L2, the two-phase
learning-rate schedule, cover/stego-paired minibatches, detector error
metrics, checkpoint I/O and the model-level gradient check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import struct

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor
from . import jpegdomain as jd
from .jpegdomain import FormatError, StegoPair
from .model import ABLATIONS, DetectorModel, build_model
from .util import atomic_write_bytes, substream

EVAL_BATCH_IMAGES = 32  # fixed so evaluations are bit-identical everywhere


@dataclass
class TrainConfig:
    batch_pairs: int = 16
    r1: float = 1e-3
    r2: float = 1e-4
    phase1_epochs: int = 8
    phase2_epochs: int = 2
    l2: float = 2e-4
    seed: int = 0
    precision: str = "standard"
    ablation: str = "full"
    init_from: str | None = None
    tlu_threshold: float = 3.0
    freeze_srm: bool = False
    max_steps: int | None = None  # optional cap for smoke runs

    def __post_init__(self):
        if not self.r1 > self.r2 > 0:
            raise ValueError("learning rates must satisfy r1 > r2 > 0")
        if self.batch_pairs < 1:
            raise ValueError("batch_pairs must be >= 1")
        if self.phase1_epochs + self.phase2_epochs < 1:
            raise ValueError("at least one epoch required")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.precision not in ("standard", "wide"):
            raise ValueError("precision must be 'standard' or 'wide'")


# ---------------------------------------------------------------------------
# optimizer

class Adamax:
    """Infinity-norm Adam variant with bias-corrected first moment.

    theta -= (lr / (1 - beta1^t)) * m / (u + eps) with m the EMA of the
    gradient and u the running max of |g|. L2 of strength `l2` is applied by
    augmenting the gradient with 2*l2*theta for the names in `decay_names`
    (convolution/dense/attention weights); biases and BN parameters are
    never regularized.
    """

    def __init__(self, params: dict[str, Tensor], l2: float = 0.0,
                 decay_names: set[str] | None = None,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.l2 = l2
        self.decay_names = decay_names or set()
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self._u = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        correction = 1.0 - self.beta1 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise ValueError(f"parameter {name} has no gradient")
            if not np.isfinite(np.sum(g)):
                raise ValueError(f"non-finite gradient for {name}; step aborted")
            if name in self.decay_names and self.l2:
                g = g + (2.0 * self.l2) * p.data
            m = self._m[name]
            u = self._u[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            np.maximum(self.beta2 * u, np.abs(g), out=u)
            p.data = p.data - (lr / correction) * m / (u + self.eps)
            p.grad = None


# ---------------------------------------------------------------------------
# metrics

@dataclass
class EvalReport:
    p_fa: float
    p_md: float
    p_e: float
    accuracy: float
    threshold_at_min: float


def evaluate_pe(cover_scores, stego_scores) -> EvalReport:
    """Minimum mean of false-alarm and missed-detection rates.

    Thresholds sweep the midpoints of adjacent sorted unique scores plus
    -inf/+inf; a sample is called stego iff its score >= threshold. Ties
    are broken by the smallest threshold. Accuracy is reported at the
    natural 0.5 cut on the stego probability.
    """
    c = np.asarray(cover_scores, dtype=np.float64)
    s = np.asarray(stego_scores, dtype=np.float64)
    if c.size == 0 or s.size == 0:
        raise ValueError("need at least one cover and one stego score")
    uniq = np.unique(np.concatenate([c, s]))
    thresholds = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2.0, [np.inf]])
    best = None
    for t in thresholds:
        p_fa = float(np.count_nonzero(c >= t)) / c.size
        p_md = float(np.count_nonzero(s < t)) / s.size
        p_e = (p_fa + p_md) / 2.0
        if best is None or p_e < best[0]:
            best = (p_e, p_fa, p_md, t)
    accuracy = (np.count_nonzero(c < 0.5) + np.count_nonzero(s >= 0.5)) / (c.size + s.size)
    return EvalReport(p_fa=best[1], p_md=best[2], p_e=best[0],
                      accuracy=float(accuracy), threshold_at_min=float(best[3]))


def evaluate_model(model: DetectorModel, pairs: list[StegoPair],
                   planes: np.ndarray | None = None) -> EvalReport:
    """Inference-mode stego scores for every cover/stego member, then P_E."""
    if planes is None:
        planes = decompress_pairs(pairs)
    scores = np.empty(planes.shape[0])
    for lo in range(0, planes.shape[0], EVAL_BATCH_IMAGES):
        batch = planes[lo:lo + EVAL_BATCH_IMAGES]
        scores[lo:lo + batch.shape[0]] = model.predict_proba(batch)[:, 1]
    return evaluate_pe(scores[0::2], scores[1::2])


def decompress_pairs(pairs: list[StegoPair]) -> np.ndarray:
    """(2n, 1, H, W) pixel planes, cover/stego interleaved per pair."""
    h, w = pairs[0].cover.h, pairs[0].cover.w
    if any((p.cover.h, p.cover.w) != (h, w) for p in pairs):
        raise ValueError("all pairs must share the same dimensions")
    out = np.empty((2 * len(pairs), 1, h, w), dtype=np.float64)
    for i, p in enumerate(pairs):
        out[2 * i, 0] = jd.decompress(p.cover)
        out[2 * i + 1, 0] = jd.decompress(p.stego)
    return out


# ---------------------------------------------------------------------------
# checkpoints (SGCK, little-endian)

_SGCK_MAGIC = b"SGCK"
_SGCK_VERSION = 1


def save_checkpoint(state: dict[str, np.ndarray], path: str) -> None:
    """Serialize named tensors (sorted by name, f32 payloads)."""
    buf = bytearray()
    buf += _SGCK_MAGIC
    buf += struct.pack("<II", _SGCK_VERSION, len(state))
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f4")
        encoded = name.encode("utf-8")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    atomic_write_bytes(path, bytes(buf))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Parse an SGCK file into a name -> array dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != _SGCK_MAGIC:
        raise FormatError(f"{path}: not an SGCK checkpoint (bad magic)")
    version, count = struct.unpack("<II", raw[4:12])
    if version != _SGCK_VERSION:
        raise FormatError(f"{path}: unsupported SGCK version {version}")
    off = 12
    state: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            if len(raw) < off + name_len:
                raise FormatError(f"{path}: truncated checkpoint")
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
            if data.size != n:
                raise FormatError(f"{path}: truncated checkpoint")
            off += 4 * n
            state[name] = data.reshape(dims).astype(np.float32)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated or corrupt checkpoint") from exc
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return state


# ---------------------------------------------------------------------------
# training

@dataclass
class EpochRow:
    epoch: int
    phase: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float
    val_pe: float


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    rows: list[EpochRow] = field(default_factory=list)
    initial_val: EvalReport | None = None
    final_val: EvalReport | None = None


def init_params(rng: np.random.Generator, height: int, width: int,
                ablation: str = "full", tlu_threshold: float = 3.0,
                freeze_srm: bool = False) -> DetectorModel:
    """Fresh parameter set under the standard initialization policy."""
    return build_model(height, width, rng, ablation=ablation,
                       tlu_threshold=tlu_threshold, freeze_srm=freeze_srm)


def _batch_arrays(planes: np.ndarray, pair_indices) -> tuple[np.ndarray, np.ndarray]:
    image_idx = np.empty(2 * len(pair_indices), dtype=np.int64)
    image_idx[0::2] = 2 * np.asarray(pair_indices)
    image_idx[1::2] = 2 * np.asarray(pair_indices) + 1
    labels = np.tile([0, 1], len(pair_indices))
    return planes[image_idx], labels


def train(cfg: TrainConfig, train_pairs: list[StegoPair],
          val_pairs: list[StegoPair], progress=None) -> TrainResult:
    """Two-phase training; returns the checkpoint with the best validation
    accuracy over the final 20% of epochs (ties go to the later epoch).

    Every minibatch holds whole cover/stego pairs: both members of a chosen
    pair are always in the same batch, interleaved cover-then-stego.
    `progress`, when given, is called with each completed EpochRow.
    """
    if not train_pairs or not val_pairs:
        raise ValueError("train and validation sets must be nonempty")
    T.set_precision(cfg.precision)
    h, w = train_pairs[0].cover.h, train_pairs[0].cover.w
    model = init_params(substream(cfg.seed, "init"), h, w, ablation=cfg.ablation,
                        tlu_threshold=cfg.tlu_threshold, freeze_srm=cfg.freeze_srm)
    if cfg.init_from is not None:
        model.apply_state(load_checkpoint(cfg.init_from))

    train_planes = decompress_pairs(train_pairs)
    val_planes = decompress_pairs(val_pairs)
    params = model.named_params()
    opt = Adamax(params, l2=cfg.l2, decay_names=model.decay_names())
    shuffle_rng = substream(cfg.seed, "shuffle")

    result = TrainResult(best_state=model.named_state(), best_epoch=0)
    result.initial_val = evaluate_model(model, val_pairs, val_planes)

    total_epochs = cfg.phase1_epochs + cfg.phase2_epochs
    window_start = total_epochs - max(1, round(0.2 * total_epochs)) + 1
    best_acc = -1.0
    steps = 0
    n_pairs = len(train_pairs)
    for epoch in range(1, total_epochs + 1):
        phase = 1 if epoch <= cfg.phase1_epochs else 2
        lr = cfg.r1 if phase == 1 else cfg.r2
        order = shuffle_rng.permutation(n_pairs)
        loss_sum = 0.0
        correct = 0
        seen = 0
        for lo in range(0, n_pairs, cfg.batch_pairs):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            chunk = order[lo:lo + cfg.batch_pairs]
            x, labels = _batch_arrays(train_planes, chunk)
            with Tape() as tape:
                logits = model.forward(Tensor(x), training=True)
                loss = T.softmax_cross_entropy(logits, labels)
            tape.backward(loss)
            opt.step(lr)
            steps += 1
            loss_sum += loss.item() * labels.size
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += labels.size
        val = evaluate_model(model, val_pairs, val_planes)
        row = EpochRow(epoch=epoch, phase=phase, lr=lr,
                       train_loss=loss_sum / max(seen, 1),
                       train_acc=correct / max(seen, 1),
                       val_acc=val.accuracy, val_pe=val.p_e)
        result.rows.append(row)
        if progress is not None:
            progress(row)
        if epoch >= window_start and val.accuracy >= best_acc:
            best_acc = val.accuracy
            result.best_state = model.named_state()
            result.best_epoch = epoch
        result.final_val = val
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    if result.best_epoch == 0:  # max_steps ended the run before the window
        result.best_state = model.named_state()
        result.best_epoch = len(result.rows)
    return result


def rows_to_csv(rows: list[EpochRow]) -> str:
    lines = ["epoch,phase,lr,train_loss,train_acc,val_acc,val_pe"]
    for r in rows:
        lines.append(f"{r.epoch},{r.phase},{r.lr:.6g},{r.train_loss:.6f},"
                     f"{r.train_acc:.6f},{r.val_acc:.6f},{r.val_pe:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# synthetic dataset generation

def synthesize_pairs(n_pairs: int, size: int, rate: float, qf: int,
                     seed: int) -> list[StegoPair]:
    """Deterministic cover/stego corpus at the given payload and quality."""
    if n_pairs < 1:
        raise ValueError("need at least one pair")
    table = jd.quant_table(qf)
    cover_rng = substream(seed, "synth")
    embed_rng = substream(seed, "embed")
    pairs = []
    for i in range(n_pairs):
        cover = jd.compress(jd.synth_cover(size, size, cover_rng), table)
        stego = jd.embed_toy(cover, rate, embed_rng)
        pairs.append(StegoPair(cover, stego, rate=rate, seed=seed))
    return pairs


# ---------------------------------------------------------------------------
# model-level gradient check

def model_gradient_check(ablation: str = "full", size: int = 16,
                         n_pairs: int = 2, seed: int = 0,
                         coords_per_param: int = 3,
                         h: float = 1e-6) -> dict[str, float]:
    """Central-difference check of every parameter group, in wide precision.

    Returns the max relative error per named parameter. A few coordinates
    per parameter are sampled; the loss is the training-mode cross-entropy
    on a small synthetic batch.

    The loss surface is piecewise smooth (relu/TLU kinks), and a difference
    quotient straddling a kink says nothing about the gradient. Each
    coordinate is therefore measured at two step sizes (h and h/2); if the
    two estimates disagree the point is not locally smooth and another
    coordinate is drawn instead.
    """
    prev = T.get_precision()
    T.set_precision("wide")
    try:
        pairs = synthesize_pairs(n_pairs, size, rate=0.5, qf=75, seed=seed)
        planes = decompress_pairs(pairs)
        labels = np.tile([0, 1], n_pairs)
        model = init_params(substream(seed, "init"), size, size, ablation=ablation)
        params = model.named_params()

        def loss_value() -> float:
            logits = model.forward(Tensor(planes), training=True)
            return T.softmax_cross_entropy(logits, labels).item()

        with Tape() as tape:
            logits = model.forward(Tensor(planes), training=True)
            loss = T.softmax_cross_entropy(logits, labels)
        tape.backward(loss)

        def central(flat, c, step):
            orig = flat[c]
            flat[c] = orig + step
            fp = loss_value()
            flat[c] = orig - step
            fm = loss_value()
            flat[c] = orig
            return (fp - fm) / (2 * step)

        coord_rng = substream(seed, "gradcheck")
        errors: dict[str, float] = {}
        for name, p in params.items():
            flat = p.data.reshape(-1)
            gflat = p.grad.reshape(-1)
            want = min(coords_per_param, flat.size)
            order = coord_rng.permutation(flat.size)
            worst = 0.0
            measured = 0
            fallback = None
            for c in order[:10 * want]:
                if measured >= want:
                    break
                n1 = central(flat, c, h)
                n2 = central(flat, c, h / 2)
                analytic = float(gflat[c])
                smooth = abs(n1 - n2) <= 2e-4 * (abs(n1) + abs(n2)) + 1e-9
                err = abs(analytic - n2) / max(1e-8, abs(analytic) + abs(n2))
                if not smooth:
                    fallback = err if fallback is None else min(fallback, err)
                    continue
                worst = max(worst, err)
                measured += 1
            if measured == 0:
                # no locally smooth coordinate found; report the best attempt
                worst = fallback if fallback is not None else 0.0
            errors[name] = worst
            p.grad = None
        return errors
    finally:
        T.set_precision(prev)
