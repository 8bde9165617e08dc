"""Encoder-decoder GRU with additive attention for activity suffix prediction.

The encoder reads encoded prefix events (activity embedding, resource
embedding, six numeric time features). The decoder receives, at every step,
the attention context concatenated with the embedding of the previous activity;
the first step is fed the last prefix activity and attends with the last
encoder state. Training uses teacher forcing and the unmasked summed
cross-entropy over targets padded with EOC to the longest training trace.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nncore as nn
from .eventlog import EOC, Example
from .features import EOC_ID, N_NUMERIC, PAD, TimeStats, Vocabulary, encode_prefix, fit
from .nncore import GruLayer, Parameter, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"ASTON1"
FORMAT_VERSION = 1


@dataclass
class AstonConfig:
    embedding_dim: int = 32
    hidden_dim: int = 32
    encoder_layers: int = 2
    decoder_layers: int = 2
    dropout: float = 0.1
    epochs: int = 150
    batch_size: int = 64
    learning_rate: float = 0.005
    seed: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        for name in ("embedding_dim", "hidden_dim", "encoder_layers", "decoder_layers", "epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.encoder_layers != self.decoder_layers:
            # decoder starts from the encoder's final state of each layer
            raise ValueError("encoder_layers and decoder_layers must match")


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class VocabularyMismatchError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Batch:
    activity_ids: np.ndarray  # (B, K) int
    resource_ids: np.ndarray  # (B, K) int
    numeric: np.ndarray  # (B, K, 6)
    mask: np.ndarray  # (B, K) bool
    targets: np.ndarray | None = None  # (B, T) int

    @property
    def size(self) -> int:
        return self.activity_ids.shape[0]

    @property
    def last_activity(self) -> np.ndarray:
        last = self.mask.sum(axis=1) - 1
        return self.activity_ids[np.arange(self.size), last]


def collate(prefixes: Sequence[np.ndarray], targets: Sequence[Sequence[int]] | None = None) -> Batch:
    """Right-pad encoded prefixes (k x 8 matrices) into a batch."""
    n = len(prefixes)
    k_max = max(p.shape[0] for p in prefixes)
    act = np.full((n, k_max), PAD, dtype=np.int64)
    res = np.full((n, k_max), PAD, dtype=np.int64)
    num = np.zeros((n, k_max, N_NUMERIC))
    mask = np.zeros((n, k_max), dtype=bool)
    for i, p in enumerate(prefixes):
        k = p.shape[0]
        act[i, :k] = p[:, 0]
        res[i, :k] = p[:, 1]
        num[i, :k] = p[:, 2:]
        mask[i, :k] = True
    tgt = None
    if targets is not None:
        tgt = np.asarray(targets, dtype=np.int64)
    return Batch(act, res, num, mask, tgt)


@dataclass
class DecoderState:
    """Recurrent state of the decoder for a batch of hypotheses (inference only)."""

    enc_states: np.ndarray  # (B, K, H)
    keys: np.ndarray  # (B, K, H)
    mask: np.ndarray  # (B, K)
    hidden: list[np.ndarray]  # per layer (B, H)

    def select(self, index) -> "DecoderState":
        index = np.asarray(index, dtype=np.int64)
        return DecoderState(self.enc_states[index], self.keys[index], self.mask[index], [h[index] for h in self.hidden])

    @property
    def query(self) -> np.ndarray:
        return self.hidden[-1]


class AstonModel:
    def __init__(
        self,
        config: AstonConfig,
        activity_vocab: Vocabulary,
        resource_vocab: Vocabulary,
        stats: TimeStats,
        max_trace_len: int,
        rng: np.random.Generator | None = None,
    ):
        self.config = config
        self.activity_vocab = activity_vocab
        self.resource_vocab = resource_vocab
        self.stats = stats
        self.max_trace_len = int(max_trace_len)
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        E, H = config.embedding_dim, config.hidden_dim
        va, vr = activity_vocab.size, resource_vocab.size
        bound = 1.0 / math.sqrt(H)

        self.activity_embedding = Parameter(rng.normal(0.0, 0.1, size=(va, E)), "activity_embedding")
        self.resource_embedding = Parameter(rng.normal(0.0, 0.1, size=(vr, E)), "resource_embedding")
        enc_in = 2 * E + N_NUMERIC
        self.encoder = [
            GruLayer(enc_in if i == 0 else H, H, rng, name=f"encoder.{i}") for i in range(config.encoder_layers)
        ]
        self.decoder = [GruLayer(H + E if i == 0 else H, H, rng, name=f"decoder.{i}") for i in range(config.decoder_layers)]
        self.att_query = Parameter(rng.uniform(-bound, bound, size=(H, H)), "attention.w_query")
        self.att_key = Parameter(rng.uniform(-bound, bound, size=(H, H)), "attention.w_key")
        self.att_score = Parameter(rng.uniform(-bound, bound, size=(H, 1)), "attention.w_score")
        self.out_weight = Parameter(rng.uniform(-bound, bound, size=(H, va)), "output.weight")
        self.out_bias = Parameter(np.zeros(va), "output.bias")

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Parameter]:
        params = [self.activity_embedding, self.resource_embedding]
        for layer in self.encoder + self.decoder:
            params.extend(layer.parameters())
        params += [self.att_query, self.att_key, self.att_score, self.out_weight, self.out_bias]
        return {p.name: p for p in params}

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: p.shape for name, p in self.named_parameters().items()}

    def check_vocab(self, activity_vocab: Vocabulary) -> None:
        if activity_vocab.size != self.activity_vocab.size:
            raise VocabularyMismatchError(
                f"model was trained with {self.activity_vocab.size} activity ids, got a vocabulary of {activity_vocab.size}"
            )

    @property
    def n_activities(self) -> int:
        return self.activity_vocab.size

    def featurize(self, prefix) -> np.ndarray:
        return encode_prefix(prefix, self.activity_vocab, self.resource_vocab, self.stats)

    # -- forward pieces -----------------------------------------------------

    def _encode(self, batch: Batch, training: bool = False, rng=None):
        """Run the encoder; returns (states (B,K,H) tensor, final hidden per layer)."""
        cfg = self.config
        B, K = batch.activity_ids.shape
        hidden = [Tensor(np.zeros((B, cfg.hidden_dim))) for _ in self.encoder]
        top_states = []
        for t in range(K):
            x = nn.concat(
                [
                    nn.embedding_lookup(self.activity_embedding, batch.activity_ids[:, t]),
                    nn.embedding_lookup(self.resource_embedding, batch.resource_ids[:, t]),
                    Tensor(batch.numeric[:, t, :]),
                ],
                axis=-1,
            )
            m = batch.mask[:, t]
            for li, layer in enumerate(self.encoder):
                x = nn.dropout(x, cfg.dropout, training, rng)
                hidden[li] = nn.gru_step(layer, x, hidden[li], mask=m)
                x = hidden[li]
            top_states.append(hidden[-1])
        return nn.stack(top_states, axis=1), hidden

    def attend(self, query: Tensor, enc_states: Tensor, keys: Tensor, mask: np.ndarray):
        """Additive attention; returns (context (B,H), weights (B,K))."""
        B, K, H = enc_states.shape
        q = nn.reshape(nn.matmul(query, self.att_query), (B, 1, H))
        scores = nn.reshape(nn.matmul(nn.tanh(nn.add(q, keys)), self.att_score), (B, K))
        weights = nn.softmax(scores, mask=mask)
        return nn.weighted_sum(weights, enc_states), weights

    def _decoder_step(self, enc_states, keys, mask, hidden, prev_ids, training=False, rng=None):
        context, weights = self.attend(hidden[-1], enc_states, keys, mask)
        x = nn.concat([context, nn.embedding_lookup(self.activity_embedding, prev_ids)], axis=-1)
        new_hidden = []
        for li, layer in enumerate(self.decoder):
            x = nn.dropout(x, self.config.dropout, training, rng)
            h = nn.gru_step(layer, x, hidden[li])
            new_hidden.append(h)
            x = h
        return x, new_hidden, weights

    def project(self, states: Tensor) -> Tensor:
        return nn.add(nn.matmul(states, self.out_weight), self.out_bias)

    def forward_train(self, batch: Batch, training: bool = False, rng=None, trace: list | None = None) -> Tensor:
        """Teacher-forced logits of shape (B, T, C) for ``batch.targets``."""
        targets = batch.targets
        if targets is None:
            raise ValueError("batch has no targets")
        if np.any(targets == PAD):
            raise ValueError("decoder targets must not contain PAD")
        enc_states, hidden = self._encode(batch, training, rng)
        keys = nn.matmul(enc_states, self.att_key)
        fed = batch.last_activity
        outputs = []
        for t in range(targets.shape[1]):
            if trace is not None:
                trace.append({"query": hidden[-1].data.copy(), "fed": fed.copy()})
            s, hidden, _ = self._decoder_step(enc_states, keys, batch.mask, hidden, fed, training, rng)
            outputs.append(s)
            fed = targets[:, t]
        return self.project(nn.stack(outputs, axis=1))

    # -- public single-prefix helpers ---------------------------------------

    def encode(self, prefix_features: np.ndarray) -> np.ndarray:
        """Top-layer encoder state for each prefix position, shape (k, H)."""
        if prefix_features.shape[0] < 1:
            raise ValueError("empty prefix")
        with nn.no_grad():
            states, _ = self._encode(collate([prefix_features]))
        return states.data[0]

    def decode_train(self, prefix_features: np.ndarray, target_suffix: Sequence[int], trace: list | None = None) -> np.ndarray:
        """Teacher-forced logits (L, C) for one prefix (deterministic, no dropout)."""
        with nn.no_grad():
            logits = self.forward_train(collate([prefix_features], [list(target_suffix)]), trace=trace)
        return logits.data[0]

    # -- inference API used by the decoding strategies ----------------------

    def begin(self, prefix_features: np.ndarray) -> tuple[DecoderState, int]:
        """Initial decoder state for one prefix and the activity fed at the first step."""
        batch = collate([prefix_features])
        with nn.no_grad():
            enc_states, hidden = self._encode(batch)
            keys = nn.matmul(enc_states, self.att_key)
        state = DecoderState(enc_states.data, keys.data, batch.mask, [h.data for h in hidden])
        return state, int(batch.last_activity[0])

    def advance(self, state: DecoderState, prev_ids: np.ndarray) -> tuple[np.ndarray, DecoderState]:
        """Feed ``prev_ids`` (B,) and return next-activity logits (B, C) with the new state."""
        with nn.no_grad():
            s, hidden, _ = self._decoder_step(
                Tensor(state.enc_states),
                Tensor(state.keys),
                state.mask,
                [Tensor(h) for h in state.hidden],
                np.asarray(prev_ids, dtype=np.int64),
            )
            logits = self.project(s)
        return logits.data.astype(np.float64), DecoderState(state.enc_states, state.keys, state.mask, [h.data for h in hidden])

    def attention_weights(self, state: DecoderState) -> np.ndarray:
        with nn.no_grad():
            keys = Tensor(state.keys)
            _, weights = self.attend(Tensor(state.query), Tensor(state.enc_states), keys, state.mask)
        return weights.data


# ---------------------------------------------------------------------------
# loss and training
# ---------------------------------------------------------------------------


def suffix_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Summed cross-entropy over every (padded) position, padding included."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} lengths differ")
    return nn.cross_entropy(logits, targets)


def target_ids(example: Example, vocab: Vocabulary, length: int) -> list[int]:
    """Suffix ids padded with EOC (or truncated) to ``length``."""
    ids = [EOC_ID if a == EOC else vocab.id(a) for a in example.suffix_activities]
    ids = ids[:length]
    return ids + [EOC_ID] * (length - len(ids))


@dataclass
class ModelCheckpoint:
    config: AstonConfig
    activity_vocab: Vocabulary
    resource_vocab: Vocabulary
    stats: TimeStats
    max_trace_len: int
    tensors: dict[str, np.ndarray]
    best_epoch: int = 0
    best_val_loss: float = float("nan")
    history: list[tuple[int, float, float]] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: AstonModel, **extra) -> "ModelCheckpoint":
        tensors = {k: p.data.copy() for k, p in model.named_parameters().items()}
        return cls(model.config, model.activity_vocab, model.resource_vocab, model.stats, model.max_trace_len, tensors, **extra)

    def to_model(self) -> AstonModel:
        model = AstonModel(self.config, self.activity_vocab, self.resource_vocab, self.stats, self.max_trace_len)
        params = model.named_parameters()
        for name, p in params.items():
            if name not in self.tensors:
                raise CheckpointShapeError(f"checkpoint lacks tensor {name!r}")
            arr = self.tensors[name]
            if arr.shape != p.shape:
                raise CheckpointShapeError(f"tensor {name!r} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.copy()
            p.grad = np.zeros_like(p.data)
            p.adam_m = np.zeros_like(p.data)
            p.adam_v = np.zeros_like(p.data)
        return model

    def write_history(self, path: str | Path) -> None:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{e},{tr!r},{va!r}" for e, tr, va in self.history]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _encode_examples(model: AstonModel, examples: Sequence[Example]):
    feats = [model.featurize(ex.prefix) for ex in examples]
    tgts = [target_ids(ex, model.activity_vocab, model.max_trace_len) for ex in examples]
    return feats, tgts


def _batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator, chunk: int = 32) -> list[np.ndarray]:
    """Shuffled mini-batches of similar prefix length (less encoder padding)."""
    order = rng.permutation(len(lengths))
    lengths = np.asarray(lengths)
    batches = []
    span = batch_size * chunk
    for start in range(0, len(order), span):
        block = order[start : start + span]
        block = block[np.argsort(lengths[block], kind="stable")]
        batches.extend(block[i : i + batch_size] for i in range(0, len(block), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def evaluate_loss(model: AstonModel, feats, tgts, batch_size: int = 256) -> float:
    """Mean per-example summed loss, without dropout."""
    if not feats:
        return float("nan")
    total = 0.0
    with nn.no_grad():
        for start in range(0, len(feats), batch_size):
            batch = collate(feats[start : start + batch_size], tgts[start : start + batch_size])
            total += float(suffix_loss(model.forward_train(batch), batch.targets).data)
    return total / len(feats)


def train(
    model: AstonModel,
    train_examples: Sequence[Example],
    val_examples: Sequence[Example],
    config: AstonConfig | None = None,
    progress: Callable[[int, float, float], None] | None = None,
) -> ModelCheckpoint:
    """Mini-batch Adam with teacher forcing; returns the lowest-validation-loss checkpoint.

    Epoch 0 in the history is the untrained model. When ``val_examples`` is
    empty the training loss drives the selection.
    """
    cfg = config or model.config
    if not train_examples:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    tr_feats, tr_tgts = _encode_examples(model, train_examples)
    va_feats, va_tgts = _encode_examples(model, val_examples)

    def select_loss(tr, va):
        return va if va_feats else tr

    def checked_loss(feats, tgts, epoch):
        try:
            return evaluate_loss(model, feats, tgts)
        except nn.NonFiniteError as exc:
            raise TrainingDivergedError(f"non-finite values in epoch {epoch}: {exc}") from exc

    tr0 = checked_loss(tr_feats, tr_tgts, 0)
    va0 = checked_loss(va_feats, va_tgts, 0)
    history = [(0, tr0, va0)]
    best = (select_loss(tr0, va0), 0, {k: p.data.copy() for k, p in model.named_parameters().items()})
    n = len(tr_feats)
    lengths = [f.shape[0] for f in tr_feats]
    for epoch in range(1, cfg.epochs + 1):
        running = 0.0
        for idx in _batches(lengths, cfg.batch_size, rng):
            batch = collate([tr_feats[i] for i in idx], [tr_tgts[i] for i in idx])
            try:
                logits = model.forward_train(batch, training=True, rng=rng)
                loss = suffix_loss(logits, batch.targets)
            except nn.NonFiniteError as exc:
                raise TrainingDivergedError(f"non-finite values in epoch {epoch}: {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"loss became {value} in epoch {epoch}")
            running += value
            nn.scale(loss, 1.0 / len(idx)).backward()
            nn.adam_step(params, cfg.learning_rate, clip_norm=cfg.clip_norm)
        tr_loss = running / n
        va_loss = checked_loss(va_feats, va_tgts, epoch)
        history.append((epoch, tr_loss, va_loss))
        if progress is not None:
            progress(epoch, tr_loss, va_loss)
        logger.info("epoch %d train_loss=%.4f val_loss=%.4f", epoch, tr_loss, va_loss)
        score = select_loss(tr_loss, va_loss)
        if score < best[0]:
            best = (score, epoch, {k: p.data.copy() for k, p in model.named_parameters().items()})
    score, epoch, tensors = best
    for name, p in model.named_parameters().items():
        p.data = tensors[name].copy()
    return ModelCheckpoint.from_model(model, best_epoch=epoch, best_val_loss=score, history=history)


def build_model(train_log, config: AstonConfig) -> AstonModel:
    """Fit encoders on ``train_log`` and initialise a model with ``config.seed``."""
    activity_vocab, resource_vocab, stats = fit(train_log)
    max_len = max(len(t) for t in train_log.traces)
    return AstonModel(config, activity_vocab, resource_vocab, stats, max_len, np.random.default_rng(config.seed))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save(checkpoint: ModelCheckpoint | AstonModel, path: str | Path) -> None:
    if isinstance(checkpoint, AstonModel):
        checkpoint = ModelCheckpoint.from_model(checkpoint)
    names = list(checkpoint.tensors)
    header = {
        "format_version": checkpoint.format_version,
        "config": asdict(checkpoint.config),
        "activity_vocab": checkpoint.activity_vocab.tokens,
        "resource_vocab": checkpoint.resource_vocab.tokens,
        "stats": checkpoint.stats.to_dict(),
        "max_trace_len": checkpoint.max_trace_len,
        "best_epoch": checkpoint.best_epoch,
        "best_val_loss": checkpoint.best_val_loss,
        "history": [list(h) for h in checkpoint.history],
        "tensors": [
            {"name": n, "shape": list(checkpoint.tensors[n].shape), "dtype": checkpoint.tensors[n].dtype.newbyteorder("<").str}
            for n in names
        ],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for n in names:
            arr = checkpoint.tensors[n]
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not an ASTON checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + 4:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", blob[pos : pos + 4])
    pos += 4
    if len(blob) < pos + hlen:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    try:
        header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header") from exc
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {header.get('format_version')}, expected {FORMAT_VERSION}")
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if len(blob) < pos + nbytes:
            raise CheckpointTruncatedError(f"{path}: tensor {entry['name']!r} is truncated")
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=pos).reshape(shape)
        tensors[entry["name"]] = arr.astype(dtype.newbyteorder("="))
        pos += nbytes
    if pos != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    cfg = AstonConfig(**header["config"])
    ckpt = ModelCheckpoint(
        config=cfg,
        activity_vocab=Vocabulary(header["activity_vocab"]),
        resource_vocab=Vocabulary(header["resource_vocab"]),
        stats=TimeStats(**header["stats"]),
        max_trace_len=int(header["max_trace_len"]),
        tensors=tensors,
        best_epoch=int(header["best_epoch"]),
        best_val_loss=float(header["best_val_loss"]),
        history=[(int(e), float(a), float(b)) for e, a, b in header["history"]],
        format_version=int(header["format_version"]),
    )
    expected = AstonModel(cfg, ckpt.activity_vocab, ckpt.resource_vocab, ckpt.stats, ckpt.max_trace_len).expected_shapes()
    for name, shape in expected.items():
        if name not in tensors or tensors[name].shape != shape:
            got = tensors[name].shape if name in tensors else None
            raise CheckpointShapeError(f"{path}: tensor {name!r} has shape {got}, expected {shape}")
    return ckpt


def load(path: str | Path) -> AstonModel:
    ckpt = load_checkpoint(path)
    with nn.precision(next(iter(ckpt.tensors.values())).dtype):
        return ckpt.to_model()
