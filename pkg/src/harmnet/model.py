"""Model variants, loss, prediction and checkpoint I/O."""

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataError, IncompatibleModelError

VARIANTS = (
    "cnn",
    "lstm",
    "gru_cnn",
    "bigru_cnn",
    "lstm_cnn",
    "bilstm_cnn",
    "att_gru_cnn",
    "att_bigru_cnn",
    "att_lstm_cnn",
    "att_bilstm_cnn",
)

DISPLAY_NAMES = {
    "cnn": "CNN",
    "lstm": "LSTM",
    "gru_cnn": "GRU CNN",
    "bigru_cnn": "Bi-GRU CNN",
    "lstm_cnn": "LSTM CNN",
    "bilstm_cnn": "Bi-LSTM CNN",
    "att_gru_cnn": "ATT GRU CNN",
    "att_bigru_cnn": "ATT Bi-GRU CNN",
    "att_lstm_cnn": "ATT LSTM CNN",
    "att_bilstm_cnn": "ATT Bi-LSTM CNN",
}


@dataclass
class ModelConfig:
    variant: str = "att_bigru_cnn"
    vocab_size: int = 2
    num_classes: int = 2
    embed_dim: int = 100
    n_max: int = 100
    filter_widths: List[int] = field(default_factory=lambda: [2, 3, 4, 5])
    channels: int = 128
    pool_window: int = 4
    hidden_size: int = 100
    dropout_rate: float = 0.25
    beta: float = 1.0
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        self.filter_widths = [int(k) for k in self.filter_widths]
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must cover the padding and unknown ids")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.uses_cnn and self.n_max < max(self.filter_widths):
            raise ConfigError("n_max shorter than the widest filter")
        ad.resolve_dtype(self.precision)

    @property
    def uses_cnn(self):
        return self.variant != "lstm"

    @property
    def recurrent_kind(self):
        if self.variant == "cnn":
            return None
        return "gru" if "gru" in self.variant else "lstm"

    @property
    def bidirectional(self):
        return "bi" in self.variant

    @property
    def attentive(self):
        return self.variant.startswith("att_")

    @property
    def dtype(self):
        return ad.resolve_dtype(self.precision)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Prediction:
    label: int
    probs: np.ndarray
    attention: Optional[np.ndarray] = None


class HarmClassifier:
    """One configured variant with its parameters.

    Wiring per variant:

    * ``cnn``: embed, conv, pool, dropout, global max, dense, softmax
    * ``lstm``: embed, lstm, last state, dense, softmax
    * ``*_cnn``: embed, conv, pool, dropout, recurrent, last state(s), dense
    * ``att_*``: as ``*_cnn`` with attention pooling instead of last state
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.training = False
        cfg = config
        dt = cfg.dtype
        rng = np.random.default_rng(cfg.seed)
        self.dropout_rng = np.random.default_rng([cfg.seed, 1])
        self.embedding = L.EmbeddingTable.init(rng, cfg.vocab_size, cfg.embed_dim, dt)
        self.conv = None
        self.rnn_fwd = self.rnn_bwd = self.attention = None
        feat = cfg.embed_dim
        if cfg.uses_cnn:
            self.conv = L.ConvBlockParams.init(rng, cfg.filter_widths, cfg.embed_dim, cfg.channels, dt)
            feat = self.conv.out_width
        kind = cfg.recurrent_kind
        if kind is not None:
            self.rnn_fwd = L.RecurrentCellParams.init(rng, kind, feat, cfg.hidden_size, dt, "rnn.fwd")
            if cfg.bidirectional:
                self.rnn_bwd = L.RecurrentCellParams.init(rng, kind, feat, cfg.hidden_size, dt, "rnn.bwd")
            feat = cfg.hidden_size * (2 if cfg.bidirectional else 1)
        if cfg.attentive:
            self.attention = L.AttentionParams.init(rng, feat, dtype=dt)
        self.out = L.DenseParams.init(rng, feat, cfg.num_classes, dt)

    # -- parameters -------------------------------------------------------

    def parameters(self) -> Dict[str, Tensor]:
        params = dict(self.embedding.parameters())
        for part in (self.conv, self.rnn_fwd, self.rnn_bwd, self.attention, self.out):
            if part is not None:
                params.update(part.parameters())
        return params

    def frozen_coordinates(self):
        """Coordinates whose gradient is discarded (the padding embedding row)."""
        mask = np.zeros(self.embedding.weight.shape, bool)
        mask[0] = True
        return {self.embedding.weight.name: mask}

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters().values()))

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state):
        params = self.parameters()
        if set(state) != set(params):
            raise IncompatibleModelError(
                f"parameter names differ: missing {sorted(set(params) - set(state))}, "
                f"unexpected {sorted(set(state) - set(params))}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise IncompatibleModelError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    # -- forward ----------------------------------------------------------

    def _check_batch(self, ids, mask):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] != self.config.n_max:
            raise ContractError(
                f"each report must be encoded to exactly n_max={self.config.n_max} ids, got shape {ids.shape}")
        if mask is None:
            mask = ids != 0
        mask = np.asarray(mask, dtype=bool).reshape(ids.shape)
        return ids, mask

    def forward_full(self, ids, mask=None):
        """Return ``(probs, attention)``; attention is ``None`` for non-att variants."""
        cfg = self.config
        ids, mask = self._check_batch(ids, mask)
        x = L.embed_sequence(ids, self.embedding)
        seq_mask = mask
        if cfg.uses_cnn:
            x = L.conv1d_multi(x, self.conv)
            x = L.max_pool(x, cfg.pool_window)
            seq_mask = L.pool_mask(mask, cfg.pool_window)
            x = ad.dropout(x, cfg.dropout_rate, self.dropout_rng, self.training)
        alpha = None
        if cfg.variant == "cnn":
            feat = ad.max_over(x, axis=1)
        else:
            # a row with no real token still needs one live step for attention
            seq_mask = seq_mask.copy()
            seq_mask[~seq_mask.any(axis=1), 0] = True
            T = x.shape[1]
            if cfg.bidirectional:
                hs = L.birnn(x, self.rnn_fwd, self.rnn_bwd, seq_mask)
            else:
                hs = L.run_rnn(x, self.rnn_fwd, "forward", seq_mask)
            if cfg.attentive:
                feat, alpha_t = L.attention_pool(hs, self.attention, seq_mask, cfg.beta)
                alpha = alpha_t.data
            else:
                # masked steps carry state, so the final row holds the last real state
                H = cfg.hidden_size
                last_f = ad.take_rows(hs, np.full(hs.shape[0], T - 1))
                if cfg.bidirectional:
                    first = ad.take_rows(hs, np.zeros(hs.shape[0], np.int64))
                    feat = ad.concat([
                        ad.index_select(last_f, 1, np.arange(H)),
                        ad.index_select(first, 1, np.arange(H, 2 * H)),
                    ], axis=1)
                else:
                    feat = last_f
        logits = L.dense(feat, self.out)
        return ad.softmax_rows(logits, 1.0), alpha

    def forward(self, ids, mask=None) -> Tensor:
        return self.forward_full(ids, mask)[0]

    __call__ = forward

    def predict(self, ids, mask=None) -> List[Prediction]:
        """Argmax class per report in inference mode (ties to the lower index)."""
        was = self.training
        self.eval()
        try:
            with ad.no_grad():
                probs, alpha = self.forward_full(ids, mask)
        finally:
            self.training = was
        P = probs.data
        labels = P.argmax(axis=1)
        out = []
        for i in range(P.shape[0]):
            out.append(Prediction(int(labels[i]), P[i].copy(), None if alpha is None else alpha[i].copy()))
        return out

    def predict_proba(self, ids, mask=None, batch_size=256):
        was = self.training
        self.eval()
        ids = np.asarray(ids, dtype=np.int64)
        mask = ids != 0 if mask is None else np.asarray(mask, bool)
        chunks = []
        try:
            with ad.no_grad():
                for s in range(0, len(ids), batch_size):
                    chunks.append(self.forward(ids[s:s + batch_size], mask[s:s + batch_size]).data)
        finally:
            self.training = was
        if not chunks:
            return np.zeros((0, self.config.num_classes))
        return np.concatenate(chunks, axis=0)


def build(config: ModelConfig) -> HarmClassifier:
    return HarmClassifier(config)


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count from the config alone."""
    c = config
    total = c.vocab_size * c.embed_dim
    feat = c.embed_dim
    if c.uses_cnn:
        total += sum(k * c.embed_dim * c.channels + c.channels for k in c.filter_widths)
        feat = c.channels * len(c.filter_widths)
    kind = c.recurrent_kind
    if kind is not None:
        blocks = L.GATE_BLOCKS[kind]
        H = c.hidden_size
        per_dir = blocks * H * (feat + H + 1)
        total += per_dir * (2 if c.bidirectional else 1)
        feat = H * (2 if c.bidirectional else 1)
    if c.attentive:
        total += feat * feat + 2 * feat
    total += feat * c.num_classes + c.num_classes
    return total


def loss(probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the true class, probabilities floored at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    C = probs.shape[1]
    if labels.shape != (probs.shape[0],):
        raise DataError(f"expected {probs.shape[0]} labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise DataError(f"label outside [0, {C})")
    picked = ad.pick(probs, labels)
    return ad.scale(ad.mean_all(ad.log(picked, floor=1e-12)), -1.0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_FIXED_TIME = (2000, 1, 1, 0, 0, 0)


def _zip_write(zf, name, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=_FIXED_TIME)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(model: HarmClassifier, path, vocab_hash: str = "", extra: Optional[dict] = None):
    """Zip container: ``meta.json`` plus one ``.npy`` per parameter.

    Timestamps are fixed so identical models give byte-identical files.
    """
    meta = {
        "format": "harmnet-checkpoint",
        "version": 1,
        "config": model.config.to_dict(),
        "vocab_hash": vocab_hash,
        "parameters": sorted(model.parameters()),
    }
    if extra:
        meta["extra"] = extra
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for name, p in sorted(model.parameters().items()):
            arr = io.BytesIO()
            np.lib.format.write_array(arr, np.ascontiguousarray(p.data), allow_pickle=False)
            _zip_write(zf, f"params/{name}.npy", arr.getvalue())
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, meta)``."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != "harmnet-checkpoint":
            raise IncompatibleModelError(f"{path} is not a harmnet checkpoint")
        model = build(ModelConfig.from_dict(meta["config"]))
        state = {}
        for name in meta["parameters"]:
            state[name] = np.lib.format.read_array(io.BytesIO(zf.read(f"params/{name}.npy")))
    model.load_state_dict(state)
    return model, meta
